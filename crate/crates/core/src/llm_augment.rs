//! Paraphrase generation through an OpenAI-compatible chat-completion API,
//! steered by seven prompt patterns.
//!
//! Every request is identified by a fingerprint of the exact payload. Live
//! runs append `(fingerprint, response)` pairs to a transcript; replay runs
//! answer from a transcript without touching the network.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{LazyLock, Mutex};
use std::thread;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{method_similarity_report, AugmentError, AugmentationRecord, SimilarityStats};
use crate::corpus::LabeledExample;
use crate::textproc::{normalize, pairwise_similarity};

pub const API_KEY_ENV: &str = "REBALANCE_LLM_API_KEY";
pub const MAX_VARIANTS_PER_REQUEST: usize = 20;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("prompt for {pattern} lacks the {placeholder} placeholder")]
    MissingPlaceholder { pattern: String, placeholder: &'static str },
    #[error("prompt for {pattern}: {reason}")]
    InvalidPattern { pattern: String, reason: String },
    #[error("unknown prompt pattern {0}")]
    UnknownPattern(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    TransportError { attempts: usize, message: String },
    #[error("rate limited; server asked to wait {retry_after_secs}s")]
    RateLimited { retry_after_secs: u64 },
    #[error("no transcript entry for request {fingerprint}")]
    ReplayMiss { fingerprint: String },
    #[error("response for {fingerprint} contains no usable paraphrase")]
    UnparseableResponse { fingerprint: String },
    #[error("API key missing: set {API_KEY_ENV}")]
    MissingApiKey,
    #[error("transcript {path}: {message}")]
    Transcript { path: String, message: String },
    #[error("duplicate transcript fingerprint {0}")]
    DuplicateFingerprint(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternId {
    Persona,
    Constraint,
    ContextManager,
    InfiniteGeneration,
    MultiturnDialogue,
    OutputAutomator,
    Recipe,
}

impl PatternId {
    pub const ALL: [PatternId; 7] = [
        PatternId::Persona,
        PatternId::Constraint,
        PatternId::ContextManager,
        PatternId::InfiniteGeneration,
        PatternId::MultiturnDialogue,
        PatternId::OutputAutomator,
        PatternId::Recipe,
    ];

    pub fn id(self) -> &'static str {
        match self {
            PatternId::Persona => "persona",
            PatternId::Constraint => "constraint",
            PatternId::ContextManager => "context_manager",
            PatternId::InfiniteGeneration => "infinite_generation",
            PatternId::MultiturnDialogue => "multiturn_dialogue",
            PatternId::OutputAutomator => "output_automator",
            PatternId::Recipe => "recipe",
        }
    }

    pub fn from_id(id: &str) -> Option<PatternId> {
        PatternId::ALL.into_iter().find(|p| p.id() == id)
    }

    fn builtin_source(self) -> &'static str {
        match self {
            PatternId::Persona => include_str!("../prompts/persona.txt"),
            PatternId::Constraint => include_str!("../prompts/constraint.txt"),
            PatternId::ContextManager => include_str!("../prompts/context_manager.txt"),
            PatternId::InfiniteGeneration => include_str!("../prompts/infinite_generation.txt"),
            PatternId::MultiturnDialogue => include_str!("../prompts/multiturn_dialogue.txt"),
            PatternId::OutputAutomator => include_str!("../prompts/output_automator.txt"),
            PatternId::Recipe => include_str!("../prompts/recipe.txt"),
        }
    }
}

impl std::fmt::Display for PatternId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn parse(s: &str) -> Option<Role> {
        match s.trim().to_lowercase().as_str() {
            "system" => Some(Role::System),
            "user" => Some(Role::User),
            "assistant" => Some(Role::Assistant),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// A prompt template. `template` becomes the final user message; `turns`
/// are the messages sent before it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPattern {
    pub pattern_id: PatternId,
    pub template: String,
    pub turns: Vec<(Role, String)>,
}

impl PromptPattern {
    pub fn builtin(id: PatternId) -> PromptPattern {
        PromptPattern::parse(id, id.builtin_source()).expect("built-in prompt is valid")
    }

    /// Parses a prompt file. A file may be split into `### role` sections;
    /// the last section must be a user message and becomes the template.
    pub fn parse(id: PatternId, source: &str) -> Result<PromptPattern, LlmError> {
        let invalid = |reason: String| LlmError::InvalidPattern { pattern: id.id().into(), reason };
        let mut sections: Vec<(Role, Vec<&str>)> = Vec::new();
        let mut preamble: Vec<&str> = Vec::new();
        for line in source.lines() {
            if let Some(head) = line.strip_prefix("### ") {
                let role = Role::parse(head).ok_or_else(|| invalid(format!("unknown role {head:?}")))?;
                sections.push((role, Vec::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                body.push(line);
            } else {
                preamble.push(line);
            }
        }
        let join = |lines: &[&str]| lines.join("\n").trim().to_string();
        let pattern = if sections.is_empty() {
            PromptPattern { pattern_id: id, template: join(&preamble), turns: Vec::new() }
        } else {
            if !join(&preamble).is_empty() {
                return Err(invalid("text before the first ### section".into()));
            }
            let (last_role, last_body) = sections.pop().expect("non-empty");
            if last_role != Role::User {
                return Err(invalid("last section must be a user message".into()));
            }
            PromptPattern {
                pattern_id: id,
                template: join(&last_body),
                turns: sections.into_iter().map(|(r, b)| (r, join(&b))).collect(),
            }
        };
        pattern.validate()?;
        Ok(pattern)
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !self.template.contains("{text}") {
            return Err(LlmError::MissingPlaceholder { pattern: self.pattern_id.id().into(), placeholder: "{text}" });
        }
        let multiturn = self.pattern_id == PatternId::MultiturnDialogue;
        if multiturn == self.turns.is_empty() {
            return Err(LlmError::InvalidPattern {
                pattern: self.pattern_id.id().into(),
                reason: if multiturn { "needs preceding turns" } else { "only the multiturn pattern has turns" }.into(),
            });
        }
        Ok(())
    }

    /// Back to the file format accepted by [`PromptPattern::parse`].
    pub fn to_source(&self) -> String {
        if self.turns.is_empty() {
            return format!("{}\n", self.template);
        }
        let mut out = String::new();
        for (role, body) in self.turns.iter().chain(std::iter::once(&(Role::User, self.template.clone()))) {
            let name = match role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            out.push_str(&format!("### {name}\n{body}\n"));
        }
        out
    }
}

/// All seven patterns, with files named `<pattern_id>.txt` in `dir`
/// replacing the built-in templates.
pub fn load_patterns(dir: Option<&Path>) -> Result<BTreeMap<PatternId, PromptPattern>, LlmError> {
    let mut out = BTreeMap::new();
    for id in PatternId::ALL {
        let pattern = match dir.map(|d| d.join(format!("{}.txt", id.id()))) {
            Some(path) if path.exists() => {
                let src = fs::read_to_string(&path).map_err(|e| LlmError::InvalidPattern {
                    pattern: id.id().into(),
                    reason: format!("{}: {e}", path.display()),
                })?;
                PromptPattern::parse(id, &src)?
            }
            _ => PromptPattern::builtin(id),
        };
        out.insert(id, pattern);
    }
    Ok(out)
}

const NUMBER_WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
];

pub fn number_word(n: usize) -> String {
    NUMBER_WORDS.get(n).map(|s| s.to_string()).unwrap_or_else(|| n.to_string())
}

fn fill(template: &str, text: &str, n: usize) -> String {
    template.replace("{n}", &number_word(n)).replace("{text}", text)
}

pub fn render_prompt(pattern: &PromptPattern, source_text: &str, n: usize) -> Result<Vec<Message>, LlmError> {
    pattern.validate()?;
    let mut messages: Vec<Message> = pattern
        .turns
        .iter()
        .map(|(role, body)| Message { role: *role, content: fill(body, source_text, n) })
        .collect();
    messages.push(Message { role: Role::User, content: fill(&pattern.template, source_text, n) });
    Ok(messages)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub pattern: PromptPattern,
    pub source: LabeledExample,
    pub n_variants: usize,
    pub temperature: f64,
    pub model_name: String,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.n_variants == 0 || self.n_variants > MAX_VARIANTS_PER_REQUEST {
            return Err(LlmError::InvalidRequest(format!(
                "n_variants {} outside 1..={MAX_VARIANTS_PER_REQUEST}",
                self.n_variants
            )));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::InvalidRequest(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.model_name.is_empty() {
            return Err(LlmError::InvalidRequest("model_name is empty".into()));
        }
        Ok(())
    }

    pub fn messages(&self) -> Result<Vec<Message>, LlmError> {
        render_prompt(&self.pattern, &self.source.text, self.n_variants)
    }

    /// Hex sha256 of the canonical request payload.
    pub fn fingerprint(&self) -> Result<String, LlmError> {
        self.validate()?;
        Ok(fingerprint_payload(&self.model_name, self.temperature, &self.messages()?, self.n_variants))
    }
}

fn fingerprint_payload(model: &str, temperature: f64, messages: &[Message], n: usize) -> String {
    #[derive(Serialize)]
    struct Canonical<'a> {
        model: &'a str,
        temperature: f64,
        messages: &'a [Message],
        n: usize,
    }
    let json = serde_json::to_vec(&Canonical { model, temperature, messages, n }).expect("payload serializes");
    hex(&Sha256::digest(&json))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_concurrency: usize,
    pub n_variants: usize,
    /// Cap on variants per source for the infinite-generation pattern.
    pub infinite_max_variants: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
            model_name: "gpt-3.5-turbo".into(),
            temperature: 0.8,
            max_concurrency: 4,
            n_variants: 5,
            infinite_max_variants: 10,
        }
    }
}

impl LlmConfig {
    pub fn request(&self, pattern: &PromptPattern, source: &LabeledExample) -> GenerationRequest {
        let n = if pattern.pattern_id == PatternId::InfiniteGeneration {
            self.n_variants.min(self.infinite_max_variants)
        } else {
            self.n_variants
        };
        GenerationRequest {
            pattern: pattern.clone(),
            source: source.clone(),
            n_variants: n,
            temperature: self.temperature,
            model_name: self.model_name.clone(),
        }
    }
}

/// Something that answers chat-completion requests with raw text.
pub trait ChatClient: Sync {
    fn complete(&self, request: &GenerationRequest, messages: &[Message]) -> Result<String, LlmError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, base_delay: Duration::from_secs(1) }
    }
}

/// Blocking HTTP client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpChatClient {
    endpoint_url: String,
    api_key: String,
    retry: RetryPolicy,
    http: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(endpoint_url: impl Into<String>, api_key: impl Into<String>, retry: RetryPolicy) -> Result<Self, LlmError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| LlmError::TransportError { attempts: 0, message: e.to_string() })?;
        Ok(HttpChatClient { endpoint_url: endpoint_url.into(), api_key: api_key.into(), retry, http })
    }

    /// Reads the key from `REBALANCE_LLM_API_KEY`.
    pub fn from_env(endpoint_url: impl Into<String>) -> Result<Self, LlmError> {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()).ok_or(LlmError::MissingApiKey)?;
        HttpChatClient::new(endpoint_url, key, RetryPolicy::default())
    }
}

enum Attempt {
    Done(String),
    Retry { message: String, wait: Option<Duration>, rate_limited: bool },
    Fatal(String),
}

impl HttpChatClient {
    fn attempt(&self, body: &serde_json::Value) -> Attempt {
        let resp = match self.http.post(&self.endpoint_url).bearer_auth(&self.api_key).json(body).send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry { message: e.to_string(), wait: None, rate_limited: false },
        };
        let status = resp.status();
        if status.as_u16() == 429 {
            let wait = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Attempt::Retry { message: "429 Too Many Requests".into(), wait, rate_limited: true };
        }
        if status.is_server_error() {
            return Attempt::Retry { message: format!("server error {status}"), wait: None, rate_limited: false };
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Attempt::Fatal(format!("{status}: {text}"));
        }
        let json: serde_json::Value = match resp.json() {
            Ok(j) => j,
            Err(e) => return Attempt::Fatal(format!("invalid JSON body: {e}")),
        };
        match json.pointer("/choices/0/message/content").and_then(|c| c.as_str()) {
            Some(content) => Attempt::Done(content.to_string()),
            None => Attempt::Fatal("response has no choices[0].message.content".into()),
        }
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &GenerationRequest, messages: &[Message]) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": request.model_name,
            "temperature": request.temperature,
            "messages": messages,
        });
        let attempts = self.retry.attempts.max(1);
        let mut last = LlmError::TransportError { attempts: 0, message: "no attempt made".into() };
        for i in 0..attempts {
            match self.attempt(&body) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(message) => return Err(LlmError::TransportError { attempts: i + 1, message }),
                Attempt::Retry { message, wait, rate_limited } => {
                    let backoff = self.retry.base_delay * 2u32.saturating_pow(i as u32);
                    let delay = wait.unwrap_or(backoff);
                    last = if rate_limited {
                        LlmError::RateLimited { retry_after_secs: delay.as_secs() }
                    } else {
                        LlmError::TransportError { attempts: i + 1, message }
                    };
                    if i + 1 < attempts {
                        thread::sleep(delay);
                    }
                }
            }
        }
        Err(last)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptEntry {
    pub fingerprint: String,
    pub response: String,
    pub timestamp: String,
}

/// Recorded responses keyed by request fingerprint, in recording order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
    index: BTreeMap<String, usize>,
}

impl Transcript {
    pub fn new() -> Transcript {
        Transcript::default()
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, fingerprint: &str) -> Option<&TranscriptEntry> {
        self.index.get(fingerprint).map(|&i| &self.entries[i])
    }

    pub fn push(&mut self, entry: TranscriptEntry) -> Result<(), LlmError> {
        if self.index.contains_key(&entry.fingerprint) {
            return Err(LlmError::DuplicateFingerprint(entry.fingerprint));
        }
        self.index.insert(entry.fingerprint.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn parse_jsonl(text: &str) -> Result<Transcript, String> {
        let mut t = Transcript::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
            t.push(entry).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(t)
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(entry_line).collect()
    }

    pub fn load(path: &Path) -> Result<Transcript, LlmError> {
        let err = |message: String| LlmError::Transcript { path: path.display().to_string(), message };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        Transcript::parse_jsonl(&text).map_err(err)
    }
}

fn entry_line(e: &TranscriptEntry) -> String {
    format!("{}\n", serde_json::to_string(e).expect("entry serializes"))
}

type Clock = Box<dyn Fn() -> String + Send + Sync>;

/// Live-mode transcript sink. Appends are serialized and, when a path is
/// set, written through to the file as they happen.
pub struct Recorder {
    state: Mutex<(Transcript, Option<File>)>,
    path: Option<PathBuf>,
    clock: Clock,
}

impl Recorder {
    pub fn in_memory() -> Recorder {
        Recorder { state: Mutex::new((Transcript::new(), None)), path: None, clock: Box::new(utc_now) }
    }

    /// Opens `path` for appending, loading any entries it already holds.
    pub fn append_to(path: &Path) -> Result<Recorder, LlmError> {
        let existing = if path.exists() { Transcript::load(path)? } else { Transcript::new() };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LlmError::Transcript { path: path.display().to_string(), message: e.to_string() })?;
        Ok(Recorder { state: Mutex::new((existing, Some(file))), path: Some(path.to_path_buf()), clock: Box::new(utc_now) })
    }

    pub fn with_clock(mut self, clock: impl Fn() -> String + Send + Sync + 'static) -> Recorder {
        self.clock = Box::new(clock);
        self
    }

    pub fn cached(&self, fingerprint: &str) -> Option<String> {
        self.state.lock().expect("recorder lock").0.get(fingerprint).map(|e| e.response.clone())
    }

    fn record(&self, fingerprint: &str, response: &str) -> Result<(), LlmError> {
        let mut guard = self.state.lock().expect("recorder lock");
        if guard.0.get(fingerprint).is_some() {
            return Ok(());
        }
        let entry = TranscriptEntry { fingerprint: fingerprint.into(), response: response.into(), timestamp: (self.clock)() };
        if let Some(file) = guard.1.as_mut() {
            file.write_all(entry_line(&entry).as_bytes()).map_err(|e| LlmError::Transcript {
                path: self.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                message: e.to_string(),
            })?;
        }
        guard.0.push(entry)
    }

    pub fn transcript(&self) -> Transcript {
        self.state.lock().expect("recorder lock").0.clone()
    }
}

fn utc_now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub enum Transport<'a> {
    Live { client: &'a dyn ChatClient, recorder: &'a Recorder },
    Replay(&'a Transcript),
}

static ENUMERATED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(?:\(?\d{1,2}[.):]|[-*•])\s*(.*)$").unwrap());

fn strip_quotes(s: &str) -> &str {
    let pairs = [('"', '"'), ('\'', '\''), ('“', '”'), ('‘', '’')];
    let s = s.trim();
    for (open, close) in pairs {
        if s.chars().count() >= 2 && s.starts_with(open) && s.ends_with(close) {
            return s[open.len_utf8()..s.len() - close.len_utf8()].trim();
        }
    }
    s
}

/// Splits a response into at most `n` candidate texts. When any line is a
/// numbered or bulleted item, only such items count.
pub fn parse_candidates(response: &str, n: usize) -> Vec<String> {
    let lines: Vec<&str> = response.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let enumerated: Vec<&str> = lines
        .iter()
        .filter_map(|l| ENUMERATED.captures(l).map(|c| c.get(1).expect("group").as_str()))
        .collect();
    let chosen = if enumerated.is_empty() { lines } else { enumerated };
    chosen
        .into_iter()
        .map(strip_quotes)
        .filter(|s| !s.is_empty())
        .take(n)
        .map(str::to_string)
        .collect()
}

/// Records for one response. Candidates and source are normalized before
/// scoring; the label is always the source's.
pub fn records_from_response(
    request: &GenerationRequest,
    fingerprint: &str,
    response: &str,
) -> Result<Vec<AugmentationRecord>, LlmError> {
    let candidates: Vec<String> = parse_candidates(response, request.n_variants)
        .iter()
        .map(|c| normalize(c))
        .filter(|c| !c.is_empty())
        .collect();
    if candidates.is_empty() {
        return Err(LlmError::UnparseableResponse { fingerprint: fingerprint.into() });
    }
    let original = normalize(&request.source.text);
    let seed = u64::from_str_radix(&fingerprint[..16.min(fingerprint.len())], 16).unwrap_or(0);
    Ok(candidates
        .into_iter()
        .map(|text| AugmentationRecord {
            parent_id: request.source.root_id().to_string(),
            method_id: request.pattern.pattern_id.id().to_string(),
            label: request.source.label,
            similarity: pairwise_similarity(&original, &text),
            original_text: original.clone(),
            augmented_text: text,
            seed,
        })
        .collect())
}

fn fetch(request: &GenerationRequest, transport: &Transport<'_>) -> Result<(String, String), LlmError> {
    let fp = request.fingerprint()?;
    let response = match transport {
        Transport::Replay(t) => {
            t.get(&fp).ok_or_else(|| LlmError::ReplayMiss { fingerprint: fp.clone() })?.response.clone()
        }
        Transport::Live { client, recorder } => match recorder.cached(&fp) {
            Some(r) => r,
            None => client.complete(request, &request.messages()?)?,
        },
    };
    Ok((fp, response))
}

pub fn generate(request: &GenerationRequest, transport: &Transport<'_>) -> Result<Vec<AugmentationRecord>, LlmError> {
    let (fp, response) = fetch(request, transport)?;
    if let Transport::Live { recorder, .. } = transport {
        recorder.record(&fp, &response)?;
    }
    records_from_response(request, &fp, &response)
}

/// Runs requests with at most `max_concurrency` in flight. Results keep the
/// request order and live responses are recorded in request order.
pub fn generate_many(
    requests: &[GenerationRequest],
    transport: &Transport<'_>,
    max_concurrency: usize,
) -> Vec<Result<Vec<AugmentationRecord>, LlmError>> {
    let width = max_concurrency.max(1);
    let mut out = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(width) {
        let fetched: Vec<Result<(String, String), LlmError>> = if chunk.len() == 1 {
            vec![fetch(&chunk[0], transport)]
        } else {
            thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|r| s.spawn(move || fetch(r, transport))).collect();
                handles.into_iter().map(|h| h.join().expect("generation thread panicked")).collect()
            })
        };
        for (request, res) in chunk.iter().zip(fetched) {
            out.push(res.and_then(|(fp, response)| {
                if let Transport::Live { recorder, .. } = transport {
                    recorder.record(&fp, &response)?;
                }
                records_from_response(request, &fp, &response)
            }));
        }
    }
    out
}

pub fn pattern_similarity_report(
    records: &[AugmentationRecord],
) -> Result<BTreeMap<String, SimilarityStats>, LlmError> {
    Ok(method_similarity_report(records)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label;
    use std::io::{BufRead, BufReader, Read};
    use std::net::TcpListener;

    fn source() -> LabeledExample {
        LabeledExample::original("s1", "we lost the baby at 20 weeks", Label::Negative)
    }

    fn request(id: PatternId) -> GenerationRequest {
        LlmConfig::default().request(&PromptPattern::builtin(id), &source())
    }

    struct Echo;

    impl ChatClient for Echo {
        fn complete(&self, r: &GenerationRequest, _: &[Message]) -> Result<String, LlmError> {
            Ok((1..=r.n_variants).map(|i| format!("{i}. variant {i} of {}\n", r.source.text)).collect())
        }
    }

    #[test]
    fn builtins_are_valid() {
        for id in PatternId::ALL {
            let p = PromptPattern::builtin(id);
            assert_eq!(p.turns.is_empty(), id != PatternId::MultiturnDialogue);
            assert_eq!(PromptPattern::parse(id, &p.to_source()).unwrap(), p);
        }
    }

    #[test]
    fn persona_and_constraint_rendering() {
        let m = render_prompt(&PromptPattern::builtin(PatternId::Persona), "t", 5).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].role, Role::User);
        assert!(m[0].content.starts_with("You are a helpful assistant"));
        assert!(m[0].content.contains("t"));
        let m = render_prompt(&PromptPattern::builtin(PatternId::Constraint), "t", 5).unwrap();
        assert!(m[0].content.contains("five different paraphrases"));
        assert!(m[0].content.contains("Paraphrases cannot use the words"));
        let m = render_prompt(&PromptPattern::builtin(PatternId::MultiturnDialogue), "hello there", 3).unwrap();
        assert_eq!(m.len(), 3);
        assert!(m[2].content.contains("hello there"));
        assert_eq!(m[1].role, Role::Assistant);
    }

    #[test]
    fn missing_text_placeholder() {
        let err = PromptPattern::parse(PatternId::Persona, "Paraphrase {n} times").unwrap_err();
        assert!(matches!(err, LlmError::MissingPlaceholder { .. }));
    }

    #[test]
    fn parser_handles_common_layouts() {
        assert_eq!(parse_candidates("1. foo\n2. foo", 5), vec!["foo", "foo"]);
        assert_eq!(parse_candidates("Sure! Here you go:\n1) \"a b\"\n2) c d\n\nHope it helps", 5), vec!["a b", "c d"]);
        assert_eq!(parse_candidates("- x\n* y\n• z", 2), vec!["x", "y"]);
        assert_eq!(parse_candidates("plain one\nplain two\n", 5), vec!["plain one", "plain two"]);
        assert!(parse_candidates("1.\n2. \"\"", 5).is_empty());
    }

    #[test]
    fn live_then_replay_agree() {
        let recorder = Recorder::in_memory().with_clock(|| "2020-01-01T00:00:00Z".into());
        let reqs: Vec<_> = PatternId::ALL.iter().map(|&p| request(p)).collect();
        let live = generate_many(&reqs, &Transport::Live { client: &Echo, recorder: &recorder }, 3);
        let transcript = recorder.transcript();
        assert_eq!(transcript.len(), 7);
        for (entry, req) in transcript.entries().iter().zip(&reqs) {
            assert_eq!(entry.fingerprint, req.fingerprint().unwrap());
        }
        let replay = generate_many(&reqs, &Transport::Replay(&transcript), 2);
        for (a, b) in live.iter().zip(&replay) {
            let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
            assert_eq!(a, b);
            assert_eq!(a.len(), 5);
            assert!(a.iter().all(|r| r.label == Label::Negative));
            for r in a {
                assert!((r.similarity - pairwise_similarity(&r.original_text, &r.augmented_text)).abs() < 1e-9);
            }
        }
        let back = Transcript::parse_jsonl(&transcript.to_jsonl()).unwrap();
        assert_eq!(back, transcript);
        let report = pattern_similarity_report(&live.into_iter().flat_map(Result::unwrap).collect::<Vec<_>>()).unwrap();
        assert_eq!(report.len(), 7);
    }

    #[test]
    fn replay_miss_and_unparseable() {
        let t = Transcript::new();
        assert!(matches!(generate(&request(PatternId::Recipe), &Transport::Replay(&t)), Err(LlmError::ReplayMiss { .. })));
        let mut t = Transcript::new();
        let req = request(PatternId::Recipe);
        t.push(TranscriptEntry { fingerprint: req.fingerprint().unwrap(), response: "  \n".into(), timestamp: "x".into() })
            .unwrap();
        assert!(matches!(generate(&req, &Transport::Replay(&t)), Err(LlmError::UnparseableResponse { .. })));
        assert!(matches!(
            t.push(TranscriptEntry { fingerprint: req.fingerprint().unwrap(), response: String::new(), timestamp: String::new() }),
            Err(LlmError::DuplicateFingerprint(_))
        ));
    }

    #[test]
    fn fingerprint_depends_on_payload() {
        let a = request(PatternId::Persona);
        let mut b = a.clone();
        b.temperature = 0.2;
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        assert_eq!(a.fingerprint().unwrap(), a.clone().fingerprint().unwrap());
        let mut c = a.clone();
        c.n_variants = 21;
        assert!(matches!(c.fingerprint(), Err(LlmError::InvalidRequest(_))));
    }

    #[test]
    fn infinite_generation_is_capped() {
        let cfg = LlmConfig { n_variants: 15, ..LlmConfig::default() };
        assert_eq!(cfg.request(&PromptPattern::builtin(PatternId::InfiniteGeneration), &source()).n_variants, 10);
        assert_eq!(cfg.request(&PromptPattern::builtin(PatternId::Recipe), &source()).n_variants, 15);
    }

    fn serve(responses: Vec<String>) -> (String, thread::JoinHandle<usize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut served = 0;
            for resp in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                stream.write_all(resp.as_bytes()).unwrap();
                served += 1;
            }
            served
        });
        (url, handle)
    }

    fn http(status: &str, extra: &str, body: &str) -> String {
        format!("HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n{extra}\r\n{body}", body.len())
    }

    #[test]
    fn http_client_retries_rate_limits_and_server_errors() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"1. a\n2. b"}}]}"#;
        let (url, server) = serve(vec![
            http("429 Too Many Requests", "Retry-After: 0\r\n", "{}"),
            http("500 Internal Server Error", "", "{}"),
            http("200 OK", "", ok),
        ]);
        let client = HttpChatClient::new(url, "k", RetryPolicy { attempts: 3, base_delay: Duration::from_millis(1) }).unwrap();
        let req = request(PatternId::Persona);
        let out = client.complete(&req, &req.messages().unwrap()).unwrap();
        assert_eq!(out, "1. a\n2. b");
        assert_eq!(server.join().unwrap(), 3);
    }

    #[test]
    fn http_client_gives_up_after_three_attempts() {
        let (url, server) = serve(vec![http("429 Too Many Requests", "Retry-After: 0\r\n", "{}"); 3]);
        let client = HttpChatClient::new(url, "k", RetryPolicy { attempts: 3, base_delay: Duration::from_millis(1) }).unwrap();
        let req = request(PatternId::Persona);
        let err = client.complete(&req, &req.messages().unwrap()).unwrap_err();
        assert!(matches!(err, LlmError::RateLimited { retry_after_secs: 0 }));
        assert_eq!(server.join().unwrap(), 3);
    }

    #[test]
    fn http_client_does_not_retry_client_errors() {
        let (url, server) = serve(vec![http("400 Bad Request", "", "{\"error\":\"bad\"}")]);
        let client = HttpChatClient::new(url, "k", RetryPolicy { attempts: 3, base_delay: Duration::from_millis(1) }).unwrap();
        let req = request(PatternId::Persona);
        assert!(matches!(client.complete(&req, &req.messages().unwrap()), Err(LlmError::TransportError { attempts: 1, .. })));
        assert_eq!(server.join().unwrap(), 1);
    }
}
