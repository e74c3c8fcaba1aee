//! Word-level augmentation operators: random swap, embedding-neighbor insertion
//! and substitution, lexicon synonym/antonym substitution, and reserved-word
//! replacement. Every operator is a pure function of its input tokens, its
//! configuration (including the seed) and the lookup resources.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Label};
use crate::seed;
use crate::textproc::{is_punctuation, is_sentinel, pairwise_similarity, tokenize, TokenSequence};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("line {line}: expected {expected} components, found {found}")]
    DimensionMismatch { line: usize, expected: usize, found: usize },
    #[error("embedding table is empty")]
    EmptyTable,
    #[error("token {0:?} is not in the embedding table")]
    UnknownToken(String),
    #[error("no token in the document is eligible for {0}")]
    NoEligibleToken(AugmentMethod),
    #[error("{method} needs {resource}")]
    MissingResource { method: AugmentMethod, resource: &'static str },
    #[error("cannot augment an empty document")]
    EmptyDocument,
    #[error("invalid augmenter configuration: {0}")]
    InvalidConfig(String),
    #[error("corpus has no examples labeled {0}")]
    EmptyTargetClass(Label),
    #[error("no records to summarize")]
    EmptyInput,
}

/// Dense word vectors keyed by lowercase token.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
    norms: Vec<f64>,
}

impl EmbeddingTable {
    /// Builds a table from `(token, vector)` rows; later duplicates are ignored.
    pub fn from_rows<I>(rows: I) -> Result<Self, AugmentError>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut table = EmbeddingTable {
            dim: 0,
            tokens: Vec::new(),
            index: HashMap::new(),
            vectors: Vec::new(),
            norms: Vec::new(),
        };
        for (line, (token, v)) in rows.into_iter().enumerate() {
            table.push(token, v, line + 1)?;
        }
        if table.tokens.is_empty() {
            return Err(AugmentError::EmptyTable);
        }
        Ok(table)
    }

    fn push(&mut self, token: String, v: Vec<f64>, line: usize) -> Result<(), AugmentError> {
        if self.tokens.is_empty() {
            if v.is_empty() {
                return Err(AugmentError::ParseError {
                    line,
                    reason: "row has no vector components".into(),
                });
            }
            self.dim = v.len();
        } else if v.len() != self.dim {
            return Err(AugmentError::DimensionMismatch {
                line,
                expected: self.dim,
                found: v.len(),
            });
        }
        let token = token.to_lowercase();
        if self.index.contains_key(&token) {
            return Ok(());
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.norms.push(v.iter().map(|x| x * x).sum::<f64>().sqrt());
        self.vectors.extend(v);
        self.tokens.push(token);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn vector(&self, token: &str) -> Option<&[f64]> {
        self.index
            .get(token)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

/// Reads the text word-vector format: a token then `dim` decimals per line.
/// A leading `count dim` header line, as written by word2vec, is skipped.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable, AugmentError> {
    let text = fs::read_to_string(path).map_err(|source| AugmentError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_embeddings(&text)
}

pub fn parse_embeddings(text: &str) -> Result<EmbeddingTable, AugmentError> {
    let mut table = EmbeddingTable {
        dim: 0,
        tokens: Vec::new(),
        index: HashMap::new(),
        vectors: Vec::new(),
        norms: Vec::new(),
    };
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let mut fields = raw.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let rest: Vec<&str> = fields.collect();
        if line == 1 && rest.len() == 1 && token.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
            continue;
        }
        let v = rest
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| AugmentError::ParseError {
                line,
                reason: e.to_string(),
            })?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(AugmentError::ParseError {
                line,
                reason: "non-finite component".into(),
            });
        }
        table.push(token.to_owned(), v, line)?;
    }
    if table.tokens.is_empty() {
        return Err(AugmentError::EmptyTable);
    }
    Ok(table)
}

/// The `k` tokens most cosine-similar to `token`, excluding itself. Ties go
/// to the lexicographically smaller token.
pub fn nearest_neighbors(table: &EmbeddingTable, token: &str, k: usize) -> Result<Vec<String>, AugmentError> {
    let &q = table
        .index
        .get(token)
        .ok_or_else(|| AugmentError::UnknownToken(token.to_owned()))?;
    let query = table.row(q);
    let qn = table.norms[q];
    let mut scored: Vec<(f64, &str)> = (0..table.len())
        .filter(|&i| i != q)
        .map(|i| {
            let denom = qn * table.norms[i];
            let sim = if denom == 0.0 {
                0.0
            } else {
                query.iter().zip(table.row(i)).map(|(a, b)| a * b).sum::<f64>() / denom
            };
            (sim, table.tokens[i].as_str())
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().take(k).map(|(_, t)| t.to_owned()).collect())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    synonyms: BTreeMap<String, BTreeSet<String>>,
    antonyms: BTreeMap<String, BTreeSet<String>>,
}

impl Lexicon {
    pub fn synonyms(&self, word: &str) -> Option<&BTreeSet<String>> {
        self.synonyms.get(word)
    }

    pub fn antonyms(&self, word: &str) -> Option<&BTreeSet<String>> {
        self.antonyms.get(word)
    }

    pub fn len(&self) -> usize {
        self.synonyms.keys().chain(self.antonyms.keys()).collect::<BTreeSet<_>>().len()
    }

    pub fn is_empty(&self) -> bool {
        self.synonyms.is_empty() && self.antonyms.is_empty()
    }

    /// Adds an entry. Self-references and empty items are dropped, and empty
    /// sets are never stored.
    pub fn insert<'a>(
        &mut self,
        word: &str,
        synonyms: impl IntoIterator<Item = &'a str>,
        antonyms: impl IntoIterator<Item = &'a str>,
    ) {
        let word = word.trim().to_lowercase();
        for (map, items) in [
            (&mut self.synonyms, synonyms.into_iter().collect::<Vec<_>>()),
            (&mut self.antonyms, antonyms.into_iter().collect()),
        ] {
            let set: BTreeSet<String> = items
                .into_iter()
                .map(|s| s.trim().to_lowercase())
                .filter(|s| !s.is_empty() && *s != word)
                .collect();
            if !set.is_empty() {
                map.entry(word.clone()).or_default().extend(set);
            }
        }
    }
}

/// Reads `word<TAB>syn1,syn2<TAB>ant1,ant2` lines; either list may be empty
/// and the antonym column may be omitted. Blank lines and `#` comments are
/// skipped.
pub fn load_lexicon(path: &Path) -> Result<Lexicon, AugmentError> {
    let text = fs::read_to_string(path).map_err(|source| AugmentError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_lexicon(&text)
}

fn split_list(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

pub fn parse_lexicon(text: &str) -> Result<Lexicon, AugmentError> {
    let mut lex = Lexicon::default();
    for (n, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(AugmentError::ParseError {
                line: n + 1,
                reason: format!("expected 2 or 3 tab-separated fields, found {}", fields.len()),
            });
        }
        if fields[0].trim().is_empty() {
            return Err(AugmentError::ParseError {
                line: n + 1,
                reason: "empty headword".into(),
            });
        }
        let ants = fields.get(2).map(|s| split_list(s)).unwrap_or_default();
        lex.insert(fields[0], split_list(fields[1]), ants);
    }
    Ok(lex)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMethod {
    SwapRandom,
    InsertEmbedding,
    SubstituteEmbedding,
    SubstituteSynonym,
    SubstituteAntonym,
    ReservedWord,
}

impl AugmentMethod {
    pub const ALL: [AugmentMethod; 6] = [
        AugmentMethod::SwapRandom,
        AugmentMethod::InsertEmbedding,
        AugmentMethod::SubstituteEmbedding,
        AugmentMethod::SubstituteSynonym,
        AugmentMethod::SubstituteAntonym,
        AugmentMethod::ReservedWord,
    ];

    pub fn id(self) -> &'static str {
        match self {
            AugmentMethod::SwapRandom => "swap_random",
            AugmentMethod::InsertEmbedding => "insert_embedding",
            AugmentMethod::SubstituteEmbedding => "substitute_embedding",
            AugmentMethod::SubstituteSynonym => "substitute_synonym",
            AugmentMethod::SubstituteAntonym => "substitute_antonym",
            AugmentMethod::ReservedWord => "reserved_word",
        }
    }

    pub fn from_id(id: &str) -> Option<AugmentMethod> {
        AugmentMethod::ALL.into_iter().find(|m| m.id() == id)
    }

    /// Share of eligible positions edited by default. Random insertion edits
    /// half of its eligible positions; the other operators a tenth.
    pub fn default_edit_fraction(self) -> f64 {
        match self {
            AugmentMethod::InsertEmbedding => 1.0,
            _ => 0.1,
        }
    }
}

impl std::fmt::Display for AugmentMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Domain replacements used by the reserved-word operator when none are configured.
pub fn default_reserved_map() -> BTreeMap<String, String> {
    [
        ("pregnant", "expecting"),
        ("baby", "newborn"),
        ("daughter", "girl"),
        ("son", "boy"),
        ("hospital", "clinic"),
        ("delivered", "birthed"),
        ("labor", "labour"),
        ("doctor", "obgyn"),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_owned(), b.to_owned()))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmenterConfig {
    pub method: AugmentMethod,
    pub edit_fraction: f64,
    pub top_k_neighbors: usize,
    pub reserved_map: BTreeMap<String, String>,
    pub seed: u64,
}

impl AugmenterConfig {
    pub fn new(method: AugmentMethod, seed: u64) -> Self {
        AugmenterConfig {
            method,
            edit_fraction: method.default_edit_fraction(),
            top_k_neighbors: 5,
            reserved_map: if method == AugmentMethod::ReservedWord {
                default_reserved_map()
            } else {
                BTreeMap::new()
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.edit_fraction > 0.0 && self.edit_fraction <= 1.0) {
            return Err(AugmentError::InvalidConfig(format!(
                "edit_fraction {} outside (0, 1]",
                self.edit_fraction
            )));
        }
        if self.top_k_neighbors == 0 {
            return Err(AugmentError::InvalidConfig("top_k_neighbors must be >= 1".into()));
        }
        if self.method == AugmentMethod::ReservedWord && self.reserved_map.is_empty() {
            return Err(AugmentError::InvalidConfig("reserved_word needs a non-empty reserved_map".into()));
        }
        Ok(())
    }

    fn edit_count(&self, eligible: usize) -> usize {
        ((self.edit_fraction * eligible as f64).round() as usize).max(1)
    }
}

/// Lookup resources shared by the operators.
#[derive(Debug, Clone, Default)]
pub struct AugmentResources {
    pub embeddings: Option<EmbeddingTable>,
    pub lexicon: Option<Lexicon>,
}

/// Tokens that may be moved by a swap: anything but sentinels and punctuation.
fn is_movable(token: &str) -> bool {
    !is_sentinel(token) && !is_punctuation(token)
}

/// Tokens that may be replaced or used as insertion anchors: alphabetic, two
/// or more characters.
pub fn is_editable(token: &str) -> bool {
    token.chars().count() >= 2 && token.chars().all(char::is_alphabetic)
}

pub fn augment_one(
    doc: &TokenSequence,
    cfg: &AugmenterConfig,
    resources: &AugmentResources,
) -> Result<TokenSequence, AugmentError> {
    cfg.validate()?;
    if doc.is_empty() {
        return Err(AugmentError::EmptyDocument);
    }
    let mut rng = seed::rng(cfg.seed);
    let mut tokens = doc.tokens().to_vec();

    if cfg.method == AugmentMethod::SwapRandom {
        let movable: Vec<usize> = (0..tokens.len()).filter(|&i| is_movable(&tokens[i])).collect();
        if movable.len() < 2 {
            return Ok(doc.clone());
        }
        for _ in 0..cfg.edit_count(movable.len()) {
            let pair = sample(&mut rng, movable.len(), 2);
            tokens.swap(movable[pair.index(0)], movable[pair.index(1)]);
        }
        return Ok(TokenSequence::new(tokens));
    }

    let candidates = |token: &str| -> Result<Vec<String>, AugmentError> {
        if !is_editable(token) {
            return Ok(Vec::new());
        }
        let list: Vec<String> = match cfg.method {
            AugmentMethod::InsertEmbedding | AugmentMethod::SubstituteEmbedding => {
                let table = resources.embeddings.as_ref().ok_or(AugmentError::MissingResource {
                    method: cfg.method,
                    resource: "an embedding table",
                })?;
                if !table.contains(token) {
                    return Ok(Vec::new());
                }
                nearest_neighbors(table, token, cfg.top_k_neighbors)?
            }
            AugmentMethod::SubstituteSynonym | AugmentMethod::SubstituteAntonym => {
                let lex = resources.lexicon.as_ref().ok_or(AugmentError::MissingResource {
                    method: cfg.method,
                    resource: "a lexicon",
                })?;
                let set = if cfg.method == AugmentMethod::SubstituteSynonym {
                    lex.synonyms(token)
                } else {
                    lex.antonyms(token)
                };
                set.map(|s| s.iter().cloned().collect()).unwrap_or_default()
            }
            AugmentMethod::ReservedWord => cfg.reserved_map.get(token).cloned().into_iter().collect(),
            AugmentMethod::SwapRandom => unreachable!(),
        };
        Ok(list
            .into_iter()
            .filter(|c| c != token && is_movable(c) && !c.chars().any(char::is_whitespace))
            .collect())
    };

    let mut eligible: Vec<(usize, Vec<String>)> = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        let c = candidates(t)?;
        if !c.is_empty() {
            eligible.push((i, c));
        }
    }
    if eligible.is_empty() {
        return Err(AugmentError::NoEligibleToken(cfg.method));
    }
    let edits = cfg.edit_count(eligible.len()).min(eligible.len());
    let mut chosen: Vec<usize> = sample(&mut rng, eligible.len(), edits).into_vec();
    chosen.sort_unstable();

    if cfg.method == AugmentMethod::InsertEmbedding {
        let mut inserts: Vec<(usize, String)> = chosen
            .iter()
            .map(|&c| {
                let (pos, options) = &eligible[c];
                (*pos, options[rng.random_range(0..options.len())].clone())
            })
            .collect();
        inserts.reverse();
        for (pos, word) in inserts {
            tokens.insert(pos + 1, word);
        }
    } else {
        for &c in &chosen {
            let (pos, options) = &eligible[c];
            tokens[*pos] = options[rng.random_range(0..options.len())].clone();
        }
    }
    Ok(TokenSequence::new(tokens))
}

/// One augmented text with its provenance and fidelity score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub parent_id: String,
    pub method_id: String,
    pub label: Label,
    pub original_text: String,
    pub augmented_text: String,
    pub similarity: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOutcome {
    pub records: Vec<AugmentationRecord>,
    /// Source examples with no eligible position.
    pub skipped: usize,
}

/// Augments every example of `target`. Each example is seeded from the
/// configured seed and its id, so results do not depend on corpus order.
pub fn augment_corpus(
    corpus: &Corpus,
    cfg: &AugmenterConfig,
    target: Label,
    resources: &AugmentResources,
) -> Result<AugmentOutcome, AugmentError> {
    cfg.validate()?;
    if corpus.class_count(target) == 0 {
        return Err(AugmentError::EmptyTargetClass(target));
    }
    let mut records = Vec::new();
    let mut skipped = 0;
    for ex in corpus.examples().iter().filter(|e| e.label == target) {
        let example_seed = seed::derive_seed(cfg.seed, &ex.id);
        let local = AugmenterConfig {
            seed: example_seed,
            ..cfg.clone()
        };
        let doc = tokenize(&ex.text);
        match augment_one(&doc, &local, resources) {
            Ok(out) => {
                let augmented_text = out.to_text();
                records.push(AugmentationRecord {
                    parent_id: ex.id.clone(),
                    method_id: cfg.method.id().to_owned(),
                    label: ex.label,
                    similarity: pairwise_similarity(&ex.text, &augmented_text),
                    original_text: ex.text.clone(),
                    augmented_text,
                    seed: example_seed,
                });
            }
            Err(AugmentError::NoEligibleToken(_) | AugmentError::EmptyDocument) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(AugmentOutcome { records, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
    pub count: usize,
}

impl SimilarityStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(SimilarityStats {
            mean,
            stddev: var.sqrt(),
            count: values.len(),
        })
    }
}

/// Mean, standard deviation and count of similarity per method id.
pub fn method_similarity_report(
    records: &[AugmentationRecord],
) -> Result<BTreeMap<String, SimilarityStats>, AugmentError> {
    if records.is_empty() {
        return Err(AugmentError::EmptyInput);
    }
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry(r.method_id.clone()).or_default().push(r.similarity);
    }
    Ok(groups
        .into_iter()
        .map(|(k, v)| (k, SimilarityStats::from_values(&v).expect("non-empty group")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabeledExample;
    use crate::textproc::{URL_TOKEN, USER_TOKEN};
    use proptest::prelude::*;

    fn seq(tokens: &[&str]) -> TokenSequence {
        TokenSequence::new(tokens.iter().copied())
    }

    fn toy_table() -> EmbeddingTable {
        parse_embeddings("a 1 0\nb 1 0\nc 0 1\n").unwrap()
    }

    fn resources() -> AugmentResources {
        let emb = parse_embeddings(
            "happy 1 0 0\nglad 0.9 0.1 0\nbaby 0 1 0\ninfant 0 0.95 0.05\nborn 0 0 1\narrived 0.05 0 0.9\n",
        )
        .unwrap();
        let lex = parse_lexicon("happy\tglad,joyful\tsad\nbaby\tinfant\t\nborn\t\tunborn\n").unwrap();
        AugmentResources {
            embeddings: Some(emb),
            lexicon: Some(lex),
        }
    }

    #[test]
    fn loads_embeddings() {
        let t = parse_embeddings("x 1 2 3 4\ny 0 0 0 1\nz 1 1 1 1\n").unwrap();
        assert_eq!((t.dim(), t.len()), (4, 3));
        assert!(matches!(
            parse_embeddings("x 1 2 3 4\ny 1 2 3\n"),
            Err(AugmentError::DimensionMismatch { line: 2, expected: 4, found: 3 })
        ));
        assert!(matches!(parse_embeddings(""), Err(AugmentError::EmptyTable)));
        assert!(matches!(parse_embeddings("x 1 zz\n"), Err(AugmentError::ParseError { line: 1, .. })));
    }

    #[test]
    fn embeddings_header_and_duplicates() {
        let t = parse_embeddings("2 2\nX 1 0\nx 0 1\n").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.vector("x").unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn loads_lexicon() {
        let lex = parse_lexicon("happy\tglad,joyful\tsad\n").unwrap();
        let syn: Vec<&str> = lex.synonyms("happy").unwrap().iter().map(String::as_str).collect();
        assert_eq!(syn, ["glad", "joyful"]);
        assert_eq!(lex.antonyms("happy").unwrap().len(), 1);

        let lex = parse_lexicon("big\tbig\t\n").unwrap();
        assert!(lex.synonyms("big").is_none());
        assert!(lex.antonyms("big").is_none());
        assert!(lex.is_empty());

        assert!(matches!(parse_lexicon("lonely\n"), Err(AugmentError::ParseError { line: 1, .. })));
    }

    #[test]
    fn neighbors_by_cosine_then_lexicographic() {
        let t = toy_table();
        assert_eq!(nearest_neighbors(&t, "a", 1).unwrap(), ["b"]);
        assert_eq!(nearest_neighbors(&t, "a", 2).unwrap(), ["b", "c"]);
        assert_eq!(nearest_neighbors(&t, "a", 10).unwrap().len(), 2);
        assert!(matches!(nearest_neighbors(&t, "z", 1), Err(AugmentError::UnknownToken(_))));

        let tied = parse_embeddings("q 1 0\nzz 1 0\nmm 1 0\n").unwrap();
        assert_eq!(nearest_neighbors(&tied, "q", 2).unwrap(), ["mm", "zz"]);
    }

    #[test]
    fn neighbors_match_brute_force() {
        let t = parse_embeddings("a 1 2\nb 2 1\nc -1 0.5\nd 0.3 0.3\n").unwrap();
        let cos = |x: &[f64], y: &[f64]| {
            let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            dot / (x.iter().map(|v| v * v).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt())
        };
        let q = t.vector("a").unwrap();
        let mut all: Vec<(f64, &str)> = ["b", "c", "d"].iter().map(|&w| (cos(q, t.vector(w).unwrap()), w)).collect();
        all.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
        let expected: Vec<&str> = all.iter().map(|p| p.1).collect();
        assert_eq!(nearest_neighbors(&t, "a", 3).unwrap(), expected);
    }

    #[test]
    fn swap_degenerate_and_pair() {
        let cfg = AugmenterConfig::new(AugmentMethod::SwapRandom, 3);
        let r = AugmentResources::default();
        assert_eq!(augment_one(&seq(&["a"]), &cfg, &r).unwrap(), seq(&["a"]));
        assert_eq!(augment_one(&seq(&["a", "b"]), &cfg, &r).unwrap(), seq(&["b", "a"]));
        assert_eq!(augment_one(&seq(&["a", "!", "<url>"]), &cfg, &r).unwrap(), seq(&["a", "!", "<url>"]));
    }

    #[test]
    fn synonym_single_choice() {
        let lex = parse_lexicon("happy\tglad\t\n").unwrap();
        let res = AugmentResources {
            embeddings: None,
            lexicon: Some(lex),
        };
        let mut cfg = AugmenterConfig::new(AugmentMethod::SubstituteSynonym, 0);
        cfg.edit_fraction = 0.01;
        for seed in 0..20 {
            cfg.seed = seed;
            assert_eq!(
                augment_one(&seq(&["i", "am", "happy"]), &cfg, &res).unwrap(),
                seq(&["i", "am", "glad"])
            );
        }
    }

    #[test]
    fn antonym_and_reserved() {
        let res = resources();
        let cfg = AugmenterConfig::new(AugmentMethod::SubstituteAntonym, 1);
        assert_eq!(augment_one(&seq(&["so", "happy"]), &cfg, &res).unwrap(), seq(&["so", "sad"]));
        let cfg = AugmenterConfig::new(AugmentMethod::ReservedWord, 1);
        assert_eq!(
            augment_one(&seq(&["pregnant", "again", "!"]), &cfg, &res).unwrap(),
            seq(&["expecting", "again", "!"])
        );
    }

    #[test]
    fn insert_places_neighbor_after_anchor() {
        let res = resources();
        let mut cfg = AugmenterConfig::new(AugmentMethod::InsertEmbedding, 9);
        cfg.top_k_neighbors = 1;
        let out = augment_one(&seq(&["<user>", "baby", "2", "!"]), &cfg, &res).unwrap();
        assert_eq!(out, seq(&["<user>", "baby", "infant", "2", "!"]));
    }

    #[test]
    fn errors() {
        let res = resources();
        let cfg = AugmenterConfig::new(AugmentMethod::SubstituteSynonym, 0);
        assert!(matches!(
            augment_one(&seq(&["nothing", "here"]), &cfg, &res),
            Err(AugmentError::NoEligibleToken(_))
        ));
        assert!(matches!(
            augment_one(&seq(&["happy"]), &cfg, &AugmentResources::default()),
            Err(AugmentError::MissingResource { .. })
        ));
        assert!(matches!(augment_one(&seq(&[]), &cfg, &res), Err(AugmentError::EmptyDocument)));
        let mut bad = cfg.clone();
        bad.method = AugmentMethod::ReservedWord;
        assert!(matches!(augment_one(&seq(&["x"]), &bad, &res), Err(AugmentError::InvalidConfig(_))));
    }

    #[test]
    fn corpus_records_and_skips() {
        let corpus = Corpus::new(vec![
            LabeledExample::original("a", "so happy today", Label::Negative),
            LabeledExample::original("b", "nothing to see", Label::Negative),
            LabeledExample::original("c", "happy due date", Label::Positive),
        ])
        .unwrap();
        let cfg = AugmenterConfig::new(AugmentMethod::SubstituteSynonym, 5);
        let out = augment_corpus(&corpus, &cfg, Label::Negative, &resources()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.skipped, 1);
        let r = &out.records[0];
        assert_eq!(r.parent_id, "a");
        assert_eq!(r.label, Label::Negative);
        assert!((r.similarity - pairwise_similarity(&r.original_text, &r.augmented_text)).abs() < 1e-12);

        let only_pos = Corpus::new(vec![corpus.examples()[2].clone()]).unwrap();
        assert!(matches!(
            augment_corpus(&only_pos, &cfg, Label::Negative, &resources()),
            Err(AugmentError::EmptyTargetClass(Label::Negative))
        ));
    }

    #[test]
    fn report_statistics() {
        let rec = |m: &str, s: f64| AugmentationRecord {
            parent_id: "p".into(),
            method_id: m.into(),
            label: Label::Negative,
            original_text: "x".into(),
            augmented_text: "y".into(),
            similarity: s,
            seed: 0,
        };
        let one = method_similarity_report(&[rec("swap_random", 0.98)]).unwrap();
        assert_eq!(one["swap_random"], SimilarityStats { mean: 0.98, stddev: 0.0, count: 1 });
        let two = method_similarity_report(&[rec("m", 0.4), rec("m", 0.6)]).unwrap();
        assert!((two["m"].mean - 0.5).abs() < 1e-12);
        assert!((two["m"].stddev - 0.1).abs() < 1e-12);
        assert!(matches!(method_similarity_report(&[]), Err(AugmentError::EmptyInput)));
    }

    fn doc_strategy() -> impl Strategy<Value = TokenSequence> {
        let vocab = vec!["happy", "baby", "born", "glad", "the", "x", "8lbs", "!", "?!", URL_TOKEN, USER_TOKEN, "pregnant"];
        prop::collection::vec(prop::sample::select(vocab), 1..15).prop_map(TokenSequence::new)
    }

    fn protected(doc: &TokenSequence) -> Vec<String> {
        let mut v: Vec<String> = doc
            .tokens()
            .iter()
            .filter(|t| is_sentinel(t) || is_punctuation(t))
            .cloned()
            .collect();
        v.sort();
        v
    }

    proptest! {
        #[test]
        fn structural_invariants(doc in doc_strategy(), seed: u64, m in 0usize..6) {
            let method = AugmentMethod::ALL[m];
            let cfg = AugmenterConfig::new(method, seed);
            let res = resources();
            match augment_one(&doc, &cfg, &res) {
                Ok(out) => {
                    prop_assert_eq!(&augment_one(&doc, &cfg, &res).unwrap(), &out);
                    prop_assert_eq!(protected(&out), protected(&doc));
                    match method {
                        AugmentMethod::SwapRandom => {
                            let (mut a, mut b) = (doc.tokens().to_vec(), out.tokens().to_vec());
                            a.sort(); b.sort();
                            prop_assert_eq!(a, b);
                        }
                        AugmentMethod::InsertEmbedding => {
                            let eligible = doc.tokens().iter().filter(|t| is_editable(t) && res.embeddings.as_ref().unwrap().contains(t)).count();
                            let edits = ((cfg.edit_fraction * eligible as f64).round() as usize).max(1).min(eligible);
                            prop_assert_eq!(out.len(), doc.len() + edits);
                        }
                        _ => prop_assert_eq!(out.len(), doc.len()),
                    }
                }
                Err(AugmentError::NoEligibleToken(_)) => {}
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
