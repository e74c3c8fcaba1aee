//! Labeled corpora: CSV/TSV loading, train/test splits and k-fold plans.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: u64, reason: String },
    #[error("missing required column {0:?} in header")]
    MissingColumn(&'static str),
    #[error("corpus contains no records")]
    EmptyCorpus,
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("example {0:?} has empty text")]
    EmptyText(String),
    #[error("augmented example {id:?} references unknown parent {parent:?}")]
    DanglingParent { id: String, parent: String },
    #[error("class {label} has {count} examples, too few to appear on both sides")]
    InsufficientClassSize { label: Label, count: usize },
    #[error("too few examples for {k} folds: {reason}")]
    TooFewExamples { k: usize, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Binary outcome label. `Positive` (1) is the majority, favorable outcome;
/// `Negative` (0) the rare one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Negative = 0,
    Positive = 1,
}

impl Label {
    pub const BOTH: [Label; 2] = [Label::Negative, Label::Positive];

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Negative),
            1 => Some(Label::Positive),
            _ => None,
        }
    }

    /// Parses the literal strings "0" and "1" (surrounding whitespace allowed).
    pub fn parse(s: &str) -> Option<Label> {
        match s.trim() {
            "0" => Some(Label::Negative),
            "1" => Some(Label::Positive),
            _ => None,
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Negative => Label::Positive,
            Label::Positive => Label::Negative,
        }
    }

    /// `-1.0` for negative, `+1.0` for positive.
    pub fn sign(self) -> f64 {
        match self {
            Label::Negative => -1.0,
            Label::Positive => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Negative => "negative",
            Label::Positive => "positive",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Label::from_u8(v).ok_or_else(|| serde::de::Error::custom(format!("label {v} is not 0 or 1")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Original,
    Augmented { method_id: String, parent_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub text: String,
    pub label: Label,
    pub origin: Origin,
}

impl LabeledExample {
    pub fn original(id: impl Into<String>, text: impl Into<String>, label: Label) -> Self {
        LabeledExample {
            id: id.into(),
            text: text.into(),
            label,
            origin: Origin::Original,
        }
    }

    pub fn is_augmented(&self) -> bool {
        matches!(self.origin, Origin::Augmented { .. })
    }

    /// The id of the original example this one descends from (itself when original).
    pub fn root_id(&self) -> &str {
        match &self.origin {
            Origin::Original => &self.id,
            Origin::Augmented { parent_id, .. } => parent_id,
        }
    }
}

/// An ordered, validated collection of labeled examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    examples: Vec<LabeledExample>,
    class_counts: [usize; 2],
}

impl Corpus {
    /// Validates ids, texts and parent references.
    pub fn new(examples: Vec<LabeledExample>) -> Result<Self, CorpusError> {
        let mut ids = HashSet::with_capacity(examples.len());
        let mut class_counts = [0usize; 2];
        for ex in &examples {
            if ex.text.trim().is_empty() {
                return Err(CorpusError::EmptyText(ex.id.clone()));
            }
            if !ids.insert(ex.id.as_str()) {
                return Err(CorpusError::DuplicateId(ex.id.clone()));
            }
            class_counts[ex.label as usize] += 1;
        }
        for ex in &examples {
            if let Origin::Augmented { parent_id, .. } = &ex.origin {
                if !ids.contains(parent_id.as_str()) {
                    return Err(CorpusError::DanglingParent {
                        id: ex.id.clone(),
                        parent: parent_id.clone(),
                    });
                }
            }
        }
        Ok(Corpus {
            examples,
            class_counts,
        })
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn into_examples(self) -> Vec<LabeledExample> {
        self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_count(&self, label: Label) -> usize {
        self.class_counts[label as usize]
    }

    /// The smaller class; ties resolve to `Negative`.
    pub fn minority_label(&self) -> Label {
        if self.class_count(Label::Positive) < self.class_count(Label::Negative) {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn majority_label(&self) -> Label {
        self.minority_label().other()
    }

    pub fn get(&self, id: &str) -> Option<&LabeledExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn labels(&self) -> Vec<Label> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Examples at the given positions, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Corpus, CorpusError> {
        Corpus::new(indices.iter().map(|&i| self.examples[i].clone()).collect())
    }

    /// Returns a copy with the text of every example passed through `f`.
    pub fn map_texts(&self, f: impl Fn(&str) -> String) -> Result<Corpus, CorpusError> {
        Corpus::new(
            self.examples
                .iter()
                .map(|e| LabeledExample {
                    text: f(&e.text),
                    ..e.clone()
                })
                .collect(),
        )
    }

    /// Appends examples, revalidating the result.
    pub fn extended(&self, extra: impl IntoIterator<Item = LabeledExample>) -> Result<Corpus, CorpusError> {
        let mut examples = self.examples.clone();
        examples.extend(extra);
        Corpus::new(examples)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Csv,
    Tsv,
}

impl CorpusFormat {
    fn delimiter(self) -> u8 {
        match self {
            CorpusFormat::Csv => b',',
            CorpusFormat::Tsv => b'\t',
        }
    }

    /// Guesses from the file extension; anything but `.tsv` is CSV.
    pub fn from_path(path: &Path) -> CorpusFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("tsv") => CorpusFormat::Tsv,
            _ => CorpusFormat::Csv,
        }
    }
}

/// Loads a corpus with a header row naming `text` and `label` columns, plus
/// optional `id`, `method` and `parent_id`. Missing ids become the zero-based
/// record index.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_corpus(file, format)
}

pub fn read_corpus(reader: impl std::io::Read, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(format.delimiter())
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let text_col = column("text").ok_or(CorpusError::MissingColumn("text"))?;
    let label_col = column("label").ok_or(CorpusError::MissingColumn("label"))?;
    let id_col = column("id");
    let method_col = column("method");
    let parent_col = column("parent_id");

    let mut examples = Vec::new();
    for (n, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { pos, expected_len, len } => CorpusError::MalformedRecord {
                line: pos.as_ref().map_or(0, |p| p.line()),
                reason: format!("expected {expected_len} fields, found {len}"),
            },
            _ => CorpusError::MalformedRecord {
                line: e.position().map_or(0, |p| p.line()),
                reason: e.to_string(),
            },
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let malformed = |reason: String| CorpusError::MalformedRecord { line, reason };
        let text = record[text_col].to_owned();
        if text.trim().is_empty() {
            return Err(malformed("empty text".into()));
        }
        let label = Label::parse(&record[label_col])
            .ok_or_else(|| malformed(format!("label {:?} is not 0 or 1", &record[label_col])))?;
        let id = match id_col.map(|c| record[c].trim()) {
            Some(id) if !id.is_empty() => id.to_owned(),
            _ => n.to_string(),
        };
        let method = method_col.map(|c| record[c].trim()).filter(|s| !s.is_empty());
        let parent = parent_col.map(|c| record[c].trim()).filter(|s| !s.is_empty());
        let origin = match (method, parent) {
            (Some(m), Some(p)) => Origin::Augmented {
                method_id: m.to_owned(),
                parent_id: p.to_owned(),
            },
            (None, None) => Origin::Original,
            _ => return Err(malformed("method and parent_id must be given together".into())),
        };
        examples.push(LabeledExample {
            id,
            text,
            label,
            origin,
        });
    }
    if examples.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Corpus::new(examples)
}

/// Writes `id,text,label` (plus `method,parent_id` when any example is
/// augmented) with minimal RFC 4180 quoting.
pub fn write_corpus(corpus: &Corpus, path: &Path, format: CorpusFormat) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    write_corpus_to(corpus, file, format)
}

pub fn write_corpus_to(corpus: &Corpus, writer: impl Write, format: CorpusFormat) -> Result<(), CorpusError> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(format.delimiter())
        .from_writer(writer);
    let with_origin = corpus.examples().iter().any(LabeledExample::is_augmented);
    if with_origin {
        w.write_record(["id", "text", "label", "method", "parent_id"])?;
    } else {
        w.write_record(["id", "text", "label"])?;
    }
    for ex in corpus.examples() {
        let label = ex.label.to_string();
        match (&ex.origin, with_origin) {
            (_, false) => w.write_record([ex.id.as_str(), &ex.text, &label])?,
            (Origin::Original, true) => w.write_record([ex.id.as_str(), &ex.text, &label, "", ""])?,
            (Origin::Augmented { method_id, parent_id }, true) => {
                w.write_record([ex.id.as_str(), &ex.text, &label, method_id, parent_id])?
            }
        }
    }
    w.flush().map_err(|source| CorpusError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            stratified: true,
            seed: 42,
        }
    }
}

fn shuffled(mut idx: Vec<usize>, seed: u64, tag: &str) -> Vec<usize> {
    idx.shuffle(&mut seed::derived_rng(seed, tag));
    idx
}

/// Number of training examples for a group of `n`, kept within `[1, n - 1]`.
fn train_share(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n - 1)
}

/// Splits into (train, test). Both sides keep the corpus order.
pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<(Corpus, Corpus), CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(CorpusError::InvalidArgument(format!(
            "train_fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let mut in_train = vec![false; corpus.len()];
    if spec.stratified {
        for label in Label::BOTH {
            let members: Vec<usize> = (0..corpus.len())
                .filter(|&i| corpus.examples[i].label == label)
                .collect();
            if members.len() < 2 {
                return Err(CorpusError::InsufficientClassSize {
                    label,
                    count: members.len(),
                });
            }
            let take = train_share(members.len(), spec.train_fraction);
            for &i in &shuffled(members, spec.seed, &format!("split/{label}"))[..take] {
                in_train[i] = true;
            }
        }
    } else {
        if corpus.len() < 2 {
            return Err(CorpusError::InvalidArgument("need at least 2 examples to split".into()));
        }
        let take = train_share(corpus.len(), spec.train_fraction);
        for &i in &shuffled((0..corpus.len()).collect(), spec.seed, "split/all")[..take] {
            in_train[i] = true;
        }
    }
    let (train, test): (Vec<usize>, Vec<usize>) = (0..corpus.len()).partition(|&i| in_train[i]);
    Ok((corpus.subset(&train)?, corpus.subset(&test)?))
}

/// Assignment of every example to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    k: usize,
    stratified: bool,
    /// `(example id, fold)` in corpus order.
    assignments: Vec<(String, usize)>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_stratified(&self) -> bool {
        self.stratified
    }

    pub fn assignments(&self) -> &[(String, usize)] {
        &self.assignments
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.iter().find(|(i, _)| i == id).map(|&(_, f)| f)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &(_, f) in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }

    /// Positions of `corpus` examples in (train, test) for `fold`.
    pub fn partition(&self, corpus: &Corpus, fold: usize) -> Result<(Vec<usize>, Vec<usize>), CorpusError> {
        let lookup: HashMap<&str, usize> =
            self.assignments.iter().map(|(id, f)| (id.as_str(), *f)).collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, ex) in corpus.examples().iter().enumerate() {
            match lookup.get(ex.id.as_str()) {
                Some(&f) if f == fold => test.push(i),
                Some(_) => train.push(i),
                None => {
                    return Err(CorpusError::InvalidArgument(format!(
                        "example {:?} is not covered by the fold plan",
                        ex.id
                    )))
                }
            }
        }
        Ok((train, test))
    }
}

/// Deals examples round-robin into `k` folds after a seeded shuffle. When
/// stratified, each class is shuffled separately and the deal continues from
/// one class into the next, so both total and per-class fold sizes differ by
/// at most one.
pub fn make_folds(corpus: &Corpus, k: usize, stratified: bool, seed: u64) -> Result<FoldPlan, CorpusError> {
    if k < 2 {
        return Err(CorpusError::InvalidArgument(format!("k = {k}; need at least 2 folds")));
    }
    if corpus.len() < k {
        return Err(CorpusError::TooFewExamples {
            k,
            reason: format!("corpus has {} examples", corpus.len()),
        });
    }
    let order: Vec<usize> = if stratified {
        let mut order = Vec::with_capacity(corpus.len());
        for label in Label::BOTH {
            let members: Vec<usize> = (0..corpus.len())
                .filter(|&i| corpus.examples[i].label == label)
                .collect();
            if members.len() < k {
                return Err(CorpusError::TooFewExamples {
                    k,
                    reason: format!("class {label} has {} examples", members.len()),
                });
            }
            order.extend(shuffled(members, seed, &format!("folds/{label}")));
        }
        order
    } else {
        shuffled((0..corpus.len()).collect(), seed, "folds/all")
    };
    let mut fold = vec![0; corpus.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    Ok(FoldPlan {
        k,
        stratified,
        assignments: corpus
            .examples()
            .iter()
            .zip(fold)
            .map(|(e, f)| (e.id.clone(), f))
            .collect(),
    })
}
