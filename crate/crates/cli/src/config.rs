use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rebalance::augment::AugmentMethod;
use rebalance::balancer::Schedule;
use rebalance::classifier::{LossKind, TrainConfig};
use rebalance::corpus::{CorpusFormat, SplitSpec};
use rebalance::llm_augment::{LlmConfig, PatternId};
use rebalance::seed::derive_seed;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Declarative run configuration. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusSection,
    pub split: SplitSection,
    pub vocab: VocabSection,
    pub augment: AugmentSection,
    pub llm: LlmSection,
    pub balance: BalanceSection,
    pub train: TrainSection,
    pub rules: RulesSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub path: PathBuf,
    /// Guessed from the extension when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<CorpusFormat>,
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train_fraction: f64,
    pub stratified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSection {
    pub min_df: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub methods: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    pub top_k_neighbors: usize,
    /// Per-method overrides of the default edit fraction.
    pub edit_fraction: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reserved_map: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmMode {
    Replay,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSection {
    pub mode: LlmMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transcript: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    pub patterns: Vec<String>,
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_concurrency: usize,
    pub n_variants: usize,
    pub infinite_max_variants: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalanceSection {
    /// Training majority count when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_count: Option<usize>,
    pub schedule: Schedule,
    pub dedup_threshold: f64,
    pub max_rounds: usize,
    pub source_methods: Vec<String>,
    pub candidates_per_source: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub loss_kind: LossKind,
    pub l2_lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub decision_threshold: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RulesSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Corpus the rule comparison is evaluated on; the held-out split when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub k: usize,
    pub stratified_folds: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("out"),
            corpus: CorpusSection::default(),
            split: SplitSection::default(),
            vocab: VocabSection::default(),
            augment: AugmentSection::default(),
            llm: LlmSection::default(),
            balance: BalanceSection::default(),
            train: TrainSection::default(),
            rules: RulesSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { path: PathBuf::from("corpus.csv"), format: None, normalize: true }
    }
}

impl Default for SplitSection {
    fn default() -> Self {
        let s = SplitSpec::default();
        SplitSection { train_fraction: s.train_fraction, stratified: s.stratified }
    }
}

impl Default for VocabSection {
    fn default() -> Self {
        VocabSection { min_df: 1 }
    }
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            methods: AugmentMethod::ALL.iter().map(|m| m.id().to_string()).collect(),
            embeddings: None,
            lexicon: None,
            top_k_neighbors: 5,
            edit_fraction: BTreeMap::new(),
            reserved_map: None,
        }
    }
}

impl Default for LlmSection {
    fn default() -> Self {
        let c = LlmConfig::default();
        LlmSection {
            mode: LlmMode::Replay,
            transcript: None,
            prompts_dir: None,
            patterns: PatternId::ALL.iter().map(|p| p.id().to_string()).collect(),
            endpoint_url: c.endpoint_url,
            model_name: c.model_name,
            temperature: c.temperature,
            max_concurrency: c.max_concurrency,
            n_variants: c.n_variants,
            infinite_max_variants: c.infinite_max_variants,
        }
    }
}

impl Default for BalanceSection {
    fn default() -> Self {
        BalanceSection {
            target_count: None,
            schedule: Schedule::DoubleEachRound,
            dedup_threshold: 0.95,
            max_rounds: 10,
            source_methods: vec![
                AugmentMethod::SubstituteSynonym.id().into(),
                AugmentMethod::SubstituteEmbedding.id().into(),
                AugmentMethod::InsertEmbedding.id().into(),
            ],
            candidates_per_source: 3,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            loss_kind: t.loss_kind,
            l2_lambda: t.l2_lambda,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            decision_threshold: t.decision_threshold,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { k: 5, stratified_folds: true }
    }
}

/// A generation method named in the config: a token-level operator or a
/// prompt pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodRef {
    Traditional(AugmentMethod),
    Llm(PatternId),
}

impl MethodRef {
    pub fn parse(id: &str) -> anyhow::Result<MethodRef> {
        if let Some(m) = AugmentMethod::from_id(id) {
            Ok(MethodRef::Traditional(m))
        } else if let Some(p) = PatternId::from_id(id) {
            Ok(MethodRef::Llm(p))
        } else {
            bail!("unknown method `{id}`")
        }
    }
}

/// Seeds handed to each stage, derived from the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub global: u64,
    pub split: u64,
    pub folds: u64,
    pub augment: u64,
    pub balance: u64,
    pub train: u64,
}

impl RunConfig {
    /// Reads TOML, or JSON when the file ends in `.json`. Paths are left as
    /// written; see [`RunConfig::resolve_paths`].
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?
        };
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.corpus.path);
        for p in [
            &mut self.augment.embeddings,
            &mut self.augment.lexicon,
            &mut self.llm.transcript,
            &mut self.llm.prompts_dir,
            &mut self.rules.path,
            &mut self.rules.corpus,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Checks value ranges, method names and that every referenced input file
    /// exists. A live-mode transcript may not exist yet.
    pub fn validate(&self) -> anyhow::Result<()> {
        let mut inputs: Vec<&Path> = vec![&self.corpus.path];
        inputs.extend(self.augment.embeddings.as_deref());
        inputs.extend(self.augment.lexicon.as_deref());
        inputs.extend(self.llm.prompts_dir.as_deref());
        inputs.extend(self.rules.path.as_deref());
        inputs.extend(self.rules.corpus.as_deref());
        if self.llm.mode == LlmMode::Replay {
            inputs.extend(self.llm.transcript.as_deref());
        }
        for p in inputs {
            if !p.exists() {
                bail!("file not found: {}", p.display());
            }
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            bail!("split.train_fraction must lie in (0, 1)");
        }
        if self.vocab.min_df == 0 {
            bail!("vocab.min_df must be >= 1");
        }
        if self.eval.k < 2 {
            bail!("eval.k must be >= 2");
        }
        if self.balance.candidates_per_source == 0 {
            bail!("balance.candidates_per_source must be >= 1");
        }
        for m in &self.augment.methods {
            if AugmentMethod::from_id(m).is_none() {
                bail!("augment.methods: unknown method `{m}`");
            }
        }
        for (m, f) in &self.augment.edit_fraction {
            if AugmentMethod::from_id(m).is_none() {
                bail!("augment.edit_fraction: unknown method `{m}`");
            }
            if !(*f > 0.0 && *f <= 1.0) {
                bail!("augment.edit_fraction.{m} must lie in (0, 1]");
            }
        }
        for p in &self.llm.patterns {
            if PatternId::from_id(p).is_none() {
                bail!("llm.patterns: unknown pattern `{p}`");
            }
        }
        if self.balance.source_methods.is_empty() {
            bail!("balance.source_methods is empty");
        }
        for m in &self.balance.source_methods {
            MethodRef::parse(m).context("balance.source_methods")?;
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        let s = self.seed;
        Seeds {
            global: s,
            split: derive_seed(s, "split"),
            folds: derive_seed(s, "folds"),
            augment: derive_seed(s, "augment"),
            balance: derive_seed(s, "balance"),
            train: derive_seed(s, "train"),
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec { train_fraction: self.split.train_fraction, stratified: self.split.stratified, seed: self.seeds().split }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            loss_kind: t.loss_kind,
            l2_lambda: t.l2_lambda,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            seed: self.seeds().train,
            decision_threshold: t.decision_threshold,
        }
    }

    pub fn llm_config(&self) -> LlmConfig {
        let l = &self.llm;
        LlmConfig {
            endpoint_url: l.endpoint_url.clone(),
            model_name: l.model_name.clone(),
            temperature: l.temperature,
            max_concurrency: l.max_concurrency,
            n_variants: l.n_variants,
            infinite_max_variants: l.infinite_max_variants,
        }
    }

    /// sha256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&RunConfig { out_dir: PathBuf::new(), ..self.clone() }).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
