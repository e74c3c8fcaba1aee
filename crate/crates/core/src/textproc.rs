//! Normalization, tokenization and TF-IDF scoring for short social-media texts.
//!
//! The TF-IDF variant is fixed: raw term counts, smoothed IDF
//! `ln((1 + n_docs) / (1 + df)) + 1`, and L2-normalized vectors. Similarity
//! between an original text and its augmentation is the cosine of the two
//! vectors under a vocabulary fitted on just that pair.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Placeholder substituted for URLs.
pub const URL_TOKEN: &str = "<url>";
/// Placeholder substituted for `@user` mentions.
pub const USER_TOKEN: &str = "<user>";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("no term reaches min_df = {min_df}")]
    EmptyVocabulary { min_df: usize },
    #[error("cannot fit a vocabulary on zero documents")]
    NoDocuments,
    #[error("min_df must be at least 1")]
    InvalidMinDf,
    #[error("vectors come from different vocabularies")]
    VocabularyMismatch,
    #[error("vocabulary file {path}: {message}")]
    VocabularyFile { path: String, message: String },
}

static URL_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(?:https?://|www\.)\S+").unwrap());
static MENTION_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(^|[^\w>])@\w+").unwrap());
static HASHTAG_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(^|[^\w&@#>])#(\w+)").unwrap());

/// Lowercases, replaces URLs and mentions by sentinels, segments hashtags and
/// collapses whitespace.
pub fn normalize(text: &str) -> String {
    let text = text.replace(['\u{2019}', '\u{2018}'], "'");
    let text = URL_RE.replace_all(&text, URL_TOKEN);
    let text = MENTION_RE.replace_all(&text, |caps: &regex::Captures<'_>| {
        format!("{}{}", &caps[1], USER_TOKEN)
    });
    let text = HASHTAG_RE.replace_all(&text, |caps: &regex::Captures<'_>| {
        format!("{}{}", &caps[1], segment_hashtag(&caps[2]))
    });
    let lowered = text.to_lowercase();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, PartialEq)]
enum CharClass {
    Lower,
    Upper,
    Digit,
    Other,
}

fn classify(c: char) -> CharClass {
    if c.is_uppercase() {
        CharClass::Upper
    } else if c.is_lowercase() {
        CharClass::Lower
    } else if c.is_numeric() {
        CharClass::Digit
    } else {
        CharClass::Other
    }
}

/// Splits a hashtag body on case changes, letter/digit boundaries and
/// underscores: `BabyGirl2016` becomes `Baby Girl 2016`, `NICUMom` becomes
/// `NICU Mom`.
pub fn segment_hashtag(tag: &str) -> String {
    let chars: Vec<char> = tag.chars().collect();
    let mut words: Vec<String> = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c == '_' {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            continue;
        }
        if let Some(&prev) = current.chars().last().as_ref() {
            let (p, k) = (classify(prev), classify(c));
            let next = chars.get(i + 1).map(|&n| classify(n));
            let boundary = match (p, k) {
                (CharClass::Lower, CharClass::Upper) => true,
                (CharClass::Digit, CharClass::Upper | CharClass::Lower) => true,
                (CharClass::Upper | CharClass::Lower, CharClass::Digit) => true,
                // acronym followed by a capitalized word: "NICUMom"
                (CharClass::Upper, CharClass::Upper) => next == Some(CharClass::Lower),
                _ => false,
            };
            if boundary {
                words.push(std::mem::take(&mut current));
            }
        }
        current.push(c);
    }
    if !current.is_empty() {
        words.push(current);
    }
    words.join(" ")
}

/// An ordered list of non-empty, whitespace-free tokens.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    /// Builds a sequence, dropping empty tokens and splitting any that contain
    /// whitespace.
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        TokenSequence(
            tokens
                .into_iter()
                .flat_map(|t| {
                    t.as_ref()
                        .split_whitespace()
                        .map(str::to_owned)
                        .collect::<Vec<_>>()
                })
                .collect(),
        )
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }

    /// Joins tokens with single spaces.
    pub fn to_text(&self) -> String {
        self.0.join(" ")
    }
}

pub fn is_sentinel(token: &str) -> bool {
    token == URL_TOKEN || token == USER_TOKEN
}

/// Pictographic ranges; each such codepoint becomes its own token.
pub fn is_emoji(c: char) -> bool {
    matches!(c as u32,
        0x1F000..=0x1FAFF | 0x2600..=0x27BF | 0x2B00..=0x2BFF)
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace() && !is_emoji(c)
}

/// True when every character of the token is punctuation.
pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(is_punct)
}

/// Splits on whitespace, then peels leading and trailing punctuation runs
/// into separate tokens. Sentinels and emoji survive as single tokens.
pub fn tokenize(text: &str) -> TokenSequence {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        split_sentinels(chunk, &mut out);
    }
    TokenSequence(out)
}

fn split_sentinels(chunk: &str, out: &mut Vec<String>) {
    let mut rest = chunk;
    loop {
        let hit = [URL_TOKEN, USER_TOKEN]
            .iter()
            .filter_map(|s| rest.find(s).map(|i| (i, *s)))
            .min();
        match hit {
            Some((i, sentinel)) => {
                split_word(&rest[..i], out);
                out.push(sentinel.to_owned());
                rest = &rest[i + sentinel.len()..];
            }
            None => {
                split_word(rest, out);
                return;
            }
        }
    }
}

fn split_word(piece: &str, out: &mut Vec<String>) {
    if piece.is_empty() {
        return;
    }
    let mut segments: Vec<(bool, String)> = Vec::new();
    let mut body = String::new();
    let flush = |body: &mut String, segments: &mut Vec<(bool, String)>| {
        if !body.is_empty() {
            segments.push((false, std::mem::take(body)));
        }
    };
    for c in piece.chars() {
        if is_emoji(c) {
            flush(&mut body, &mut segments);
            segments.push((true, c.to_string()));
        } else if c == '\u{FE0F}' || c == '\u{200D}' {
            // presentation selectors and joiners carry no content of their own
            continue;
        } else {
            body.push(c);
        }
    }
    flush(&mut body, &mut segments);

    for (emoji, seg) in segments {
        if emoji {
            out.push(seg);
            continue;
        }
        let start = seg.find(|c: char| !is_punct(c));
        let Some(start) = start else {
            out.push(seg);
            continue;
        };
        let end = seg
            .char_indices()
            .filter(|&(_, c)| !is_punct(c))
            .map(|(i, c)| i + c.len_utf8())
            .next_back()
            .unwrap_or(seg.len());
        if start > 0 {
            out.push(seg[..start].to_owned());
        }
        out.push(seg[start..end].to_owned());
        if end < seg.len() {
            out.push(seg[end..].to_owned());
        }
    }
}

/// Identity of a fitted vocabulary, used to reject vectors and models built
/// against a different one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VocabFingerprint(pub u64);

impl std::fmt::Display for VocabFingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl Serialize for VocabFingerprint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for VocabFingerprint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16)
            .map(VocabFingerprint)
            .map_err(serde::de::Error::custom)
    }
}

/// Term index and document frequencies for TF-IDF weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    term_to_index: BTreeMap<String, usize>,
    terms: Vec<String>,
    doc_freq: Vec<usize>,
    n_docs: usize,
    fingerprint: VocabFingerprint,
}

#[derive(Serialize, Deserialize)]
struct VocabEntry {
    term: String,
    index: usize,
    doc_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    n_docs: usize,
    terms: Vec<VocabEntry>,
}

/// Fits a vocabulary holding every term whose document frequency is at least
/// `min_df`. Indices follow lexicographic term order.
pub fn fit_vocabulary(docs: &[TokenSequence], min_df: usize) -> Result<Vocabulary, TextError> {
    if docs.is_empty() {
        return Err(TextError::NoDocuments);
    }
    if min_df == 0 {
        return Err(TextError::InvalidMinDf);
    }
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in docs {
        let mut seen: Vec<&str> = doc.tokens().iter().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let kept: Vec<(String, usize)> = df
        .into_iter()
        .filter(|&(_, n)| n >= min_df)
        .map(|(t, n)| (t.to_owned(), n))
        .collect();
    if kept.is_empty() {
        return Err(TextError::EmptyVocabulary { min_df });
    }
    Ok(Vocabulary::from_parts(kept, docs.len()))
}

impl Vocabulary {
    fn from_parts(entries: Vec<(String, usize)>, n_docs: usize) -> Self {
        let mut hasher = Sha256::new();
        hasher.update((n_docs as u64).to_le_bytes());
        let mut term_to_index = BTreeMap::new();
        let mut terms = Vec::with_capacity(entries.len());
        let mut doc_freq = Vec::with_capacity(entries.len());
        for (i, (term, df)) in entries.into_iter().enumerate() {
            hasher.update((term.len() as u64).to_le_bytes());
            hasher.update(term.as_bytes());
            hasher.update((df as u64).to_le_bytes());
            term_to_index.insert(term.clone(), i);
            terms.push(term);
            doc_freq.push(df);
        }
        let digest = hasher.finalize();
        let fingerprint = VocabFingerprint(u64::from_le_bytes(digest[..8].try_into().unwrap()));
        Vocabulary {
            term_to_index,
            terms,
            doc_freq,
            n_docs,
            fingerprint,
        }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.term_to_index.get(term).copied()
    }

    pub fn term(&self, index: usize) -> Option<&str> {
        self.terms.get(index).map(String::as_str)
    }

    pub fn doc_freq(&self, index: usize) -> usize {
        self.doc_freq[index]
    }

    pub fn fingerprint(&self) -> VocabFingerprint {
        self.fingerprint
    }

    /// Smoothed inverse document frequency of the term at `index`.
    pub fn idf(&self, index: usize) -> f64 {
        smoothed_idf(self.n_docs, self.doc_freq[index])
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            n_docs: self.n_docs,
            terms: self
                .terms
                .iter()
                .zip(&self.doc_freq)
                .enumerate()
                .map(|(index, (term, &doc_freq))| VocabEntry {
                    term: term.clone(),
                    index,
                    doc_freq,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, String> {
        let mut file: VocabFile = serde_json::from_str(json).map_err(|e| e.to_string())?;
        file.terms.sort_by_key(|e| e.index);
        for (i, e) in file.terms.iter().enumerate() {
            if e.index != i {
                return Err(format!("indices are not contiguous at {i}"));
            }
            if e.doc_freq == 0 || e.doc_freq > file.n_docs {
                return Err(format!("doc_freq of {:?} outside [1, n_docs]", e.term));
            }
        }
        let entries: Vec<(String, usize)> =
            file.terms.into_iter().map(|e| (e.term, e.doc_freq)).collect();
        let vocab = Vocabulary::from_parts(entries, file.n_docs);
        if vocab.term_to_index.len() != vocab.terms.len() {
            return Err("duplicate terms".into());
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        fs::write(path, self.to_json()).map_err(|e| TextError::VocabularyFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let err = |message: String| TextError::VocabularyFile {
            path: path.display().to_string(),
            message,
        };
        let json = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        Vocabulary::from_json(&json).map_err(err)
    }
}

pub fn smoothed_idf(n_docs: usize, doc_freq: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + doc_freq as f64)).ln() + 1.0
}

/// Non-negative sparse weights over a fitted vocabulary, sorted by index.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    fingerprint: VocabFingerprint,
    entries: Vec<(usize, f64)>,
}

impl SparseVector {
    /// Builds a vector from raw `(index, weight)` pairs. Zero weights are
    /// dropped and duplicate indices summed.
    pub fn from_entries(fingerprint: VocabFingerprint, entries: Vec<(usize, f64)>) -> Self {
        let mut map: BTreeMap<usize, f64> = BTreeMap::new();
        for (i, w) in entries {
            *map.entry(i).or_insert(0.0) += w;
        }
        SparseVector {
            fingerprint,
            entries: map.into_iter().filter(|&(_, w)| w != 0.0).collect(),
        }
    }

    pub fn fingerprint(&self) -> VocabFingerprint {
        self.fingerprint
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map(|p| self.entries[p].1)
            .unwrap_or(0.0)
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|&(_, w)| w * w).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, alpha: f64) -> SparseVector {
        SparseVector::from_entries(
            self.fingerprint,
            self.entries.iter().map(|&(i, w)| (i, w * alpha)).collect(),
        )
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut a, mut b) = (self.entries.iter().peekable(), other.entries.iter().peekable());
        let mut sum = 0.0;
        while let (Some(&&(i, x)), Some(&&(j, y))) = (a.peek(), b.peek()) {
            match i.cmp(&j) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    sum += x * y;
                    a.next();
                    b.next();
                }
            }
        }
        sum
    }
}

/// TF-IDF vector of `doc`, L2-normalized. Out-of-vocabulary tokens are ignored.
pub fn vectorize(doc: &TokenSequence, vocab: &Vocabulary) -> SparseVector {
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for t in doc.tokens() {
        if let Some(i) = vocab.index_of(t) {
            *counts.entry(i).or_insert(0.0) += 1.0;
        }
    }
    let weighted: Vec<(usize, f64)> = counts
        .into_iter()
        .map(|(i, tf)| (i, tf * vocab.idf(i)))
        .collect();
    let norm = weighted.iter().map(|&(_, w)| w * w).sum::<f64>().sqrt();
    let entries = if norm > 0.0 {
        weighted.into_iter().map(|(i, w)| (i, w / norm)).collect()
    } else {
        Vec::new()
    };
    SparseVector {
        fingerprint: vocab.fingerprint(),
        entries,
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(u: &SparseVector, v: &SparseVector) -> Result<f64, TextError> {
    if u.fingerprint != v.fingerprint {
        return Err(TextError::VocabularyMismatch);
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((u.dot(v) / (nu * nv)).min(1.0))
}

/// Fidelity score of an augmentation: cosine of the two texts' TF-IDF vectors
/// under a vocabulary fitted on the pair alone.
pub fn pairwise_similarity(original: &str, augmented: &str) -> f64 {
    let docs = [tokenize(original), tokenize(augmented)];
    let Ok(vocab) = fit_vocabulary(&docs, 1) else {
        return 0.0;
    };
    let (u, v) = (vectorize(&docs[0], &vocab), vectorize(&docs[1], &vocab));
    cosine(&u, &v).unwrap_or(0.0)
}

/// Sorted term counts of one text, for repeated pairwise scoring against many
/// others without refitting a vocabulary each time.
#[derive(Debug, Clone, PartialEq)]
pub struct TermCounts(Vec<(String, f64)>);

impl TermCounts {
    pub fn new(text: &str) -> Self {
        let mut tokens = tokenize(text).into_inner();
        tokens.sort_unstable();
        let mut counts: Vec<(String, f64)> = Vec::new();
        for t in tokens {
            match counts.last_mut() {
                Some((last, n)) if *last == t => *n += 1.0,
                _ => counts.push((t, 1.0)),
            }
        }
        TermCounts(counts)
    }

    /// Same value as [`pairwise_similarity`] on the two source texts. With two
    /// documents, shared terms get IDF 1 and unshared terms `ln(3/2) + 1`.
    pub fn similarity(&self, other: &TermCounts) -> f64 {
        let solo = smoothed_idf(2, 1);
        let (a, b) = (&self.0, &other.0);
        let (mut i, mut j) = (0, 0);
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        while i < a.len() || j < b.len() {
            let ord = match (a.get(i), b.get(j)) {
                (Some(x), Some(y)) => x.0.cmp(&y.0),
                (Some(_), None) => std::cmp::Ordering::Less,
                _ => std::cmp::Ordering::Greater,
            };
            match ord {
                std::cmp::Ordering::Less => {
                    na += (a[i].1 * solo).powi(2);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    nb += (b[j].1 * solo).powi(2);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    dot += a[i].1 * b[j].1;
                    na += a[i].1 * a[i].1;
                    nb += b[j].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        (dot / (na.sqrt() * nb.sqrt())).min(1.0)
    }
}
