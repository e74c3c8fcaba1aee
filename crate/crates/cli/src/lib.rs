//! Command-line pipeline: ingest, augment, balance, train, evaluate,
//! cross-validate, apply rules, run trend experiments and generate fixtures.

pub mod config;
pub mod svg;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rebalance::augment::{
    augment_corpus, load_embeddings, load_lexicon, method_similarity_report, AugmentMethod, AugmentResources,
    AugmentationRecord, AugmenterConfig, SimilarityStats,
};
use rebalance::balancer::{
    trend_experiment, BalanceError, BalancePlan, Balancer, Generator, LlmGenerator, TraditionalGenerator,
};
use rebalance::classifier::{LinearModel, TfidfLinear};
use rebalance::corpus::{load_corpus, make_folds, split, write_corpus_to, Corpus, CorpusFormat, Label};
use rebalance::eval::{cross_validate, errors_csv, evaluate, report_csv, EvalReport, Headline};
use rebalance::fixtures;
use rebalance::llm_augment::{
    generate_many, load_patterns, pattern_similarity_report, HttpChatClient, PatternId, PromptPattern, Recorder,
    Transcript, Transport,
};
use rebalance::rules::{compare_with_without, load_rules, rule_stats_csv, RuleSet};
use rebalance::seed::derive_seed;
use rebalance::textproc::{normalize, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::config::{LlmMode, MethodRef, RunConfig};
use crate::svg::{line_chart, Series};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FIXTURE_CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "rebalance", version, about = "Augment, rebalance and classify short texts")]
pub struct Cli {
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Tsv,
}

impl From<FormatArg> for CorpusFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => CorpusFormat::Csv,
            FormatArg::Tsv => CorpusFormat::Tsv,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and normalize the corpus; write it back with a class-count summary.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// Augment the minority class and report similarity per method.
    Augment {
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long)]
        all_traditional: bool,
        /// Paraphrase through the prompt patterns.
        #[arg(long)]
        llm: bool,
        /// Replay this transcript instead of calling the endpoint.
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        patterns: Vec<String>,
    },
    /// Grow the training minority class to the target count.
    Balance,
    /// Fit the classifier on the training split.
    Train {
        #[arg(long)]
        balanced: bool,
    },
    /// Evaluate a trained model.
    Eval {
        #[arg(long)]
        model_dir: Option<PathBuf>,
        /// Evaluate on this corpus instead of the held-out split.
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// k-fold cross-validation.
    Cv {
        #[arg(long)]
        k: Option<usize>,
        /// Also report metrics after rule overrides.
        #[arg(long)]
        rules: bool,
        /// Rebalance each training fold.
        #[arg(long)]
        balanced: bool,
    },
    /// Apply rule overrides to classifier predictions.
    Rules {
        /// Report the classifier with and without rules.
        #[arg(long)]
        compare: bool,
        #[arg(long)]
        rules_file: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Metrics after every balancing round.
    Trend {
        /// Also balance with each token-level method alone.
        #[arg(long)]
        by_method: bool,
    },
    /// Synthetic fixture data.
    Fixtures {
        #[command(subcommand)]
        action: FixturesAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum FixturesAction {
    /// Write the corpus, resources, rules, prompts, transcript and a config.
    Generate {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

/// Failure classes, mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "configuration error: {e:#}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

trait Tag<T> {
    fn config(self) -> Result<T, CliError>;
    fn runtime(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for Result<T, E> {
    fn config(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Config(e.into()))
    }
    fn runtime(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime(e.into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    /// One of csv, json, jsonl, svg.
    pub schema: String,
}

/// Provenance record kept at the root of the output directory. Paths are
/// relative to that directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub commands: BTreeMap<String, Vec<Artifact>>,
}

impl Manifest {
    pub fn load(path: &Path) -> anyhow::Result<Manifest> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid manifest {}", path.display()))
    }
}

struct Out {
    root: PathBuf,
    command: String,
    artifacts: Vec<Artifact>,
}

impl Out {
    fn new(root: &Path, command: &str) -> Out {
        Out { root: root.to_path_buf(), command: command.into(), artifacts: Vec::new() }
    }

    fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display())).runtime()?;
        }
        fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display())).runtime()?;
        let schema = Path::new(rel).extension().and_then(|e| e.to_str()).unwrap_or("").to_string();
        self.artifacts.push(Artifact { path: rel.into(), schema });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).runtime()?;
        s.push('\n');
        self.write(rel, s)
    }

    /// Records this command's artifacts in the manifest, replacing entries
    /// left by a run under a different config.
    fn finish(self, ctx: &Ctx) -> Result<(), CliError> {
        let path = self.root.join(MANIFEST_FILE);
        let mut manifest = match Manifest::load(&path) {
            Ok(m) if m.config_hash == ctx.hash => m,
            _ => Manifest::default(),
        };
        manifest.config_hash = ctx.hash.clone();
        let s = ctx.cfg.seeds();
        manifest.seeds = [
            ("global", s.global),
            ("split", s.split),
            ("folds", s.folds),
            ("augment", s.augment),
            ("balance", s.balance),
            ("train", s.train),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let n = self.artifacts.len();
        manifest.commands.insert(self.command.clone(), self.artifacts);
        let mut json = serde_json::to_string_pretty(&manifest).runtime()?;
        json.push('\n');
        fs::create_dir_all(&self.root).runtime()?;
        fs::write(&path, json).with_context(|| format!("cannot write {}", path.display())).runtime()?;
        println!("{}: wrote {n} artifacts to {}", self.command, self.root.display());
        Ok(())
    }
}

struct Ctx {
    cfg: RunConfig,
    hash: String,
}

fn load_ctx(cli: &Cli, tweak: impl FnOnce(&mut RunConfig)) -> Result<Ctx, CliError> {
    let (mut cfg, base) = match &cli.config {
        Some(path) => (RunConfig::load(path).config()?, path.parent().unwrap_or(Path::new("")).to_path_buf()),
        None => (RunConfig::default(), PathBuf::new()),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let hash = cfg.hash();
    cfg.resolve_paths(&base);
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    tweak(&mut cfg);
    cfg.validate().config()?;
    Ok(Ctx { cfg, hash })
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Fixtures { action: FixturesAction::Generate { dir } } => cmd_fixtures(cli, dir.as_deref()),
        Command::Ingest { input, format } => {
            let ctx = load_ctx(cli, |c| {
                if let Some(p) = input {
                    c.corpus.path = p.clone();
                }
                if let Some(f) = format {
                    c.corpus.format = Some((*f).into());
                }
            })?;
            cmd_ingest(&ctx)
        }
        Command::Augment { methods, all_traditional, llm, replay, patterns } => {
            let ctx = load_ctx(cli, |c| {
                if let Some(p) = replay {
                    c.llm.mode = LlmMode::Replay;
                    c.llm.transcript = Some(p.clone());
                }
                if !patterns.is_empty() {
                    c.llm.patterns = patterns.clone();
                }
                if *all_traditional {
                    c.augment.methods = AugmentMethod::ALL.iter().map(|m| m.id().to_string()).collect();
                } else if !methods.is_empty() {
                    c.augment.methods = methods.clone();
                } else if *llm {
                    c.augment.methods.clear();
                }
            })?;
            cmd_augment(&ctx, *llm)
        }
        Command::Balance => cmd_balance(&load_ctx(cli, |_| {})?),
        Command::Train { balanced } => cmd_train(&load_ctx(cli, |_| {})?, *balanced),
        Command::Eval { model_dir, test } => cmd_eval(&load_ctx(cli, |_| {})?, model_dir.as_deref(), test.as_deref()),
        Command::Cv { k, rules, balanced } => {
            let ctx = load_ctx(cli, |c| {
                if let Some(k) = k {
                    c.eval.k = *k;
                }
            })?;
            cmd_cv(&ctx, *rules, *balanced)
        }
        Command::Rules { compare, rules_file, corpus } => {
            let ctx = load_ctx(cli, |c| {
                if let Some(p) = rules_file {
                    c.rules.path = Some(p.clone());
                }
                if let Some(p) = corpus {
                    c.rules.corpus = Some(p.clone());
                }
            })?;
            cmd_rules(&ctx, *compare)
        }
        Command::Trend { by_method } => cmd_trend(&load_ctx(cli, |_| {})?, *by_method),
    }
}

/// Reads a corpus, normalizing texts when configured.
fn read_corpus_file(cfg: &RunConfig, path: &Path, format: Option<CorpusFormat>) -> Result<Corpus, CliError> {
    let format = format.unwrap_or_else(|| CorpusFormat::from_path(path));
    let corpus = load_corpus(path, format).with_context(|| format!("cannot load corpus {}", path.display())).config()?;
    if cfg.corpus.normalize {
        corpus.map_texts(normalize).runtime()
    } else {
        Ok(corpus)
    }
}

fn main_corpus(cfg: &RunConfig) -> Result<Corpus, CliError> {
    read_corpus_file(cfg, &cfg.corpus.path, cfg.corpus.format)
}

fn train_test(cfg: &RunConfig) -> Result<(Corpus, Corpus), CliError> {
    split(&main_corpus(cfg)?, &cfg.split_spec()).runtime()
}

fn corpus_bytes(corpus: &Corpus) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_corpus_to(corpus, &mut buf, CorpusFormat::Csv).runtime()?;
    Ok(buf)
}

fn cmd_ingest(ctx: &Ctx) -> Result<(), CliError> {
    let corpus = main_corpus(&ctx.cfg)?;
    let summary = serde_json::json!({
        "negative": corpus.class_count(Label::Negative),
        "positive": corpus.class_count(Label::Positive),
        "total": corpus.len(),
    });
    let mut out = Out::new(&ctx.cfg.out_dir, "ingest");
    out.write("ingest/corpus.csv", corpus_bytes(&corpus)?)?;
    out.write_json("ingest/summary.json", &summary)?;
    println!("{summary}");
    out.finish(ctx)
}

/// Everything generators borrow from.
struct Env {
    resources: AugmentResources,
    patterns: BTreeMap<PatternId, PromptPattern>,
    backend: Option<Backend>,
}

enum Backend {
    Replay(Transcript),
    Live { client: HttpChatClient, recorder: Recorder },
}

impl Env {
    fn new(cfg: &RunConfig, methods: &[MethodRef]) -> Result<Env, CliError> {
        let needs_embeddings = methods.iter().any(|m| {
            matches!(m, MethodRef::Traditional(AugmentMethod::InsertEmbedding | AugmentMethod::SubstituteEmbedding))
        });
        let needs_lexicon = methods.iter().any(|m| {
            matches!(m, MethodRef::Traditional(AugmentMethod::SubstituteSynonym | AugmentMethod::SubstituteAntonym))
        });
        let embeddings = match (&cfg.augment.embeddings, needs_embeddings) {
            (Some(p), true) => Some(load_embeddings(p).config()?),
            (None, true) => return Err(CliError::Config(anyhow!("augment.embeddings is required by the embedding methods"))),
            _ => None,
        };
        let lexicon = match (&cfg.augment.lexicon, needs_lexicon) {
            (Some(p), true) => Some(load_lexicon(p).config()?),
            (None, true) => return Err(CliError::Config(anyhow!("augment.lexicon is required by the lexicon methods"))),
            _ => None,
        };
        let uses_llm = methods.iter().any(|m| matches!(m, MethodRef::Llm(_)));
        let (patterns, backend) = if uses_llm {
            let patterns = load_patterns(cfg.llm.prompts_dir.as_deref()).config()?;
            let backend = match cfg.llm.mode {
                LlmMode::Replay => {
                    let path = cfg.llm.transcript.as_ref().ok_or_else(|| CliError::Config(anyhow!("replay mode needs llm.transcript")))?;
                    Backend::Replay(Transcript::load(path).config()?)
                }
                LlmMode::Live => {
                    let client = HttpChatClient::from_env(cfg.llm.endpoint_url.clone()).config()?;
                    let path = cfg.llm.transcript.clone().unwrap_or_else(|| cfg.out_dir.join("llm/transcript.jsonl"));
                    if let Some(dir) = path.parent() {
                        fs::create_dir_all(dir).runtime()?;
                    }
                    Backend::Live { client, recorder: Recorder::append_to(&path).runtime()? }
                }
            };
            (patterns, Some(backend))
        } else {
            (BTreeMap::new(), None)
        };
        Ok(Env { resources: AugmentResources { embeddings, lexicon }, patterns, backend })
    }

    fn transport(&self) -> Transport<'_> {
        match self.backend.as_ref().expect("llm backend configured") {
            Backend::Replay(t) => Transport::Replay(t),
            Backend::Live { client, recorder } => Transport::Live { client, recorder },
        }
    }

    fn generators<'a>(
        &'a self,
        cfg: &RunConfig,
        methods: &[MethodRef],
        train: &Corpus,
    ) -> Result<Vec<Box<dyn Generator + 'a>>, CliError> {
        let mut out: Vec<Box<dyn Generator + 'a>> = Vec::new();
        for m in methods {
            match *m {
                MethodRef::Traditional(method) => {
                    let g = TraditionalGenerator::new(augmenter_config(cfg, method), &self.resources)
                        .config()?
                        .with_candidates(cfg.balance.candidates_per_source);
                    out.push(Box::new(g));
                }
                MethodRef::Llm(p) => {
                    out.push(Box::new(LlmGenerator::new(self.patterns[&p].clone(), cfg.llm_config(), self.transport(), train)));
                }
            }
        }
        Ok(out)
    }
}

fn augmenter_config(cfg: &RunConfig, method: AugmentMethod) -> AugmenterConfig {
    let mut a = AugmenterConfig::new(method, cfg.seeds().augment);
    if let Some(&f) = cfg.augment.edit_fraction.get(method.id()) {
        a.edit_fraction = f;
    }
    a.top_k_neighbors = cfg.augment.top_k_neighbors;
    if method == AugmentMethod::ReservedWord {
        if let Some(map) = &cfg.augment.reserved_map {
            a.reserved_map = map.clone();
        }
    }
    a
}

fn parse_methods(ids: &[String]) -> Result<Vec<MethodRef>, CliError> {
    ids.iter().map(|m| MethodRef::parse(m)).collect::<anyhow::Result<_>>().config()
}

fn similarity_csv(report: &BTreeMap<String, SimilarityStats>) -> String {
    let mut s = String::from("method,mean,stddev,count\n");
    for (m, st) in report {
        let _ = writeln!(s, "{m},{},{},{}", st.mean, st.stddev, st.count);
    }
    s
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String, CliError> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).runtime()?);
        s.push('\n');
    }
    Ok(s)
}

fn cmd_augment(ctx: &Ctx, llm: bool) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let corpus = main_corpus(cfg)?;
    let target = corpus.minority_label();
    let mut methods = parse_methods(&cfg.augment.methods)?;
    if llm {
        methods.extend(parse_methods(&cfg.llm.patterns)?);
    }
    if methods.is_empty() {
        return Err(CliError::Config(anyhow!("no augmentation methods selected")));
    }
    let env = Env::new(cfg, &methods)?;

    let mut records: Vec<AugmentationRecord> = Vec::new();
    let mut skipped = BTreeMap::new();
    for m in &methods {
        if let MethodRef::Traditional(method) = *m {
            let outcome = augment_corpus(&corpus, &augmenter_config(cfg, method), target, &env.resources).runtime()?;
            skipped.insert(method.id().to_string(), outcome.skipped);
            records.extend(outcome.records);
        }
    }
    let mut report = if records.is_empty() { BTreeMap::new() } else { method_similarity_report(&records).runtime()? };

    let patterns: Vec<PatternId> = methods.iter().filter_map(|m| if let MethodRef::Llm(p) = m { Some(*p) } else { None }).collect();
    if !patterns.is_empty() {
        let llm_cfg = cfg.llm_config();
        let requests: Vec<_> = corpus
            .examples()
            .iter()
            .filter(|e| e.label == target)
            .flat_map(|e| patterns.iter().map(|p| llm_cfg.request(&env.patterns[p], e)).collect::<Vec<_>>())
            .collect();
        let mut llm_records = Vec::new();
        for r in generate_many(&requests, &env.transport(), llm_cfg.max_concurrency) {
            llm_records.extend(r.runtime()?);
        }
        if !llm_records.is_empty() {
            report.extend(pattern_similarity_report(&llm_records).runtime()?);
        }
        records.extend(llm_records);
    }

    let mut out = Out::new(&cfg.out_dir, "augment");
    out.write("augment/records.jsonl", jsonl(&records)?)?;
    out.write("augment/similarity.csv", similarity_csv(&report))?;
    out.write_json("augment/skipped.json", &skipped)?;
    out.finish(ctx)
}

fn balance_plan(cfg: &RunConfig, train: &Corpus, seed: u64) -> BalancePlan {
    let b = &cfg.balance;
    let mut plan = BalancePlan::to_parity(train, b.source_methods.clone(), seed);
    if let Some(t) = b.target_count {
        plan.target_count = t;
    }
    plan.schedule = b.schedule;
    plan.dedup_threshold = b.dedup_threshold;
    plan.max_rounds = b.max_rounds;
    plan
}

fn run_balance(
    env: &Env,
    cfg: &RunConfig,
    train: &Corpus,
    plan: &BalancePlan,
) -> Result<(Corpus, rebalance::balancer::BalanceTrace), CliError> {
    let methods = parse_methods(&plan.source_methods)?;
    let mut gens = env.generators(cfg, &methods, train)?;
    let refs: Vec<&mut dyn Generator> = gens.iter_mut().map(|g| g.as_mut() as &mut dyn Generator).collect();
    rebalance::balancer::balance(train, plan, refs).runtime()
}

fn cmd_balance(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let (train, _) = train_test(cfg)?;
    let plan = balance_plan(cfg, &train, cfg.seeds().balance);
    let env = Env::new(cfg, &parse_methods(&plan.source_methods)?)?;
    let (balanced, trace) = run_balance(&env, cfg, &train, &plan)?;
    let mut out = Out::new(&cfg.out_dir, "balance");
    out.write("balance/train.csv", corpus_bytes(&balanced)?)?;
    out.write("balance/trace.csv", trace.to_csv())?;
    out.finish(ctx)
}

fn cmd_train(ctx: &Ctx, balanced: bool) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let (mut train, _) = train_test(cfg)?;
    if balanced {
        let plan = balance_plan(cfg, &train, cfg.seeds().balance);
        let env = Env::new(cfg, &parse_methods(&plan.source_methods)?)?;
        train = run_balance(&env, cfg, &train, &plan)?.0;
    }
    let clf = TfidfLinear::fit(&train, cfg.vocab.min_df, &cfg.train_config()).runtime()?;
    let mut out = Out::new(&cfg.out_dir, "train");
    out.write("train/vocab.json", clf.vocab.to_json())?;
    out.write("train/model.json", clf.model.to_json())?;
    out.finish(ctx)
}

fn cmd_eval(ctx: &Ctx, model_dir: Option<&Path>, test: Option<&Path>) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let dir = model_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("train"));
    let vocab = Vocabulary::load(&dir.join("vocab.json")).config()?;
    let model = LinearModel::load(&dir.join("model.json")).config()?;
    let threshold = model.train_config.map_or(cfg.train.decision_threshold, |t| t.decision_threshold);
    let clf = TfidfLinear::new(vocab, model, threshold).config()?;
    let test = match test {
        Some(p) => read_corpus_file(cfg, p, None)?,
        None => train_test(cfg)?.1,
    };
    let report = evaluate(&clf, &test).runtime()?;
    let mut out = Out::new(&cfg.out_dir, "eval");
    out.write_json("eval/report.json", &report)?;
    out.write("eval/report.csv", report_csv(&[("model", &report)]).runtime()?)?;
    out.write("eval/errors.csv", errors_csv(&report).runtime()?)?;
    out.finish(ctx)
}

fn headline_csv(rows: &[(String, Headline)]) -> Result<String, CliError> {
    let mut s = String::new();
    for (i, (name, h)) in rows.iter().enumerate() {
        let value = serde_json::to_value(h).runtime()?;
        let obj = value.as_object().expect("struct serializes to an object");
        if i == 0 {
            let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
            let _ = writeln!(s, "row,{}", keys.join(","));
        }
        let vals: Vec<String> = obj.values().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{name},{}", vals.join(","));
    }
    Ok(s)
}

fn load_ruleset(cfg: &RunConfig) -> Result<RuleSet, CliError> {
    let path = cfg.rules.path.as_ref().ok_or_else(|| CliError::Config(anyhow!("rules.path is not set")))?;
    load_rules(path).config()
}

fn cmd_cv(ctx: &Ctx, with_rules: bool, balanced: bool) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let corpus = main_corpus(cfg)?;
    let seeds = cfg.seeds();
    let plan = make_folds(&corpus, cfg.eval.k, cfg.eval.stratified_folds, seeds.folds).runtime()?;
    let ruleset = if with_rules { Some(load_ruleset(cfg)?) } else { None };
    let env = if balanced { Some(Env::new(cfg, &parse_methods(&cfg.balance.source_methods)?)?) } else { None };
    let rebalance = |train: &Corpus, fold: usize| -> Result<Corpus, rebalance::Error> {
        let env = env.as_ref().expect("set when balancing");
        let plan = balance_plan(cfg, train, derive_seed(seeds.balance, &format!("fold{fold}")));
        let methods: Vec<MethodRef> =
            plan.source_methods.iter().map(|m| MethodRef::parse(m).expect("validated")).collect();
        let mut gens = env.generators(cfg, &methods, train).map_err(|_| BalanceError::InvalidPlan("generators".into()))?;
        let refs: Vec<&mut dyn Generator> = gens.iter_mut().map(|g| g.as_mut() as &mut dyn Generator).collect();
        Ok(rebalance::balancer::balance(train, &plan, refs)?.0)
    };
    let report = cross_validate(
        &corpus,
        &plan,
        &cfg.train_config(),
        cfg.vocab.min_df,
        ruleset.as_ref(),
        if balanced { Some(&rebalance) } else { None },
    )
    .runtime()?;

    let mut rows: Vec<(String, Headline)> = report.folds.iter().map(|f| (format!("fold{}", f.fold), f.report.headline())).collect();
    rows.push(("mean".into(), report.mean));
    rows.push(("stddev".into(), report.stddev));
    if let (Some(m), Some(s)) = (report.with_rules_mean, report.with_rules_stddev) {
        rows.push(("rules_mean".into(), m));
        rows.push(("rules_stddev".into(), s));
    }
    let mut out = Out::new(&cfg.out_dir, "cv");
    out.write_json("cv/report.json", &report)?;
    out.write("cv/summary.csv", headline_csv(&rows)?)?;
    out.finish(ctx)
}

fn cmd_rules(ctx: &Ctx, compare: bool) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let ruleset = load_ruleset(cfg)?;
    let (train, test) = train_test(cfg)?;
    let test = match &cfg.rules.corpus {
        Some(p) => read_corpus_file(cfg, p, None)?,
        None => test,
    };
    let clf = TfidfLinear::fit(&train, cfg.vocab.min_df, &cfg.train_config()).runtime()?;
    let cmp = compare_with_without(&ruleset, &clf, &test).runtime()?;
    let mut out = Out::new(&cfg.out_dir, "rules");
    if compare {
        out.write_json("rules/without.json", &cmp.without)?;
        out.write_json("rules/with.json", &cmp.with)?;
        out.write("rules/report.csv", report_csv(&[("model", &cmp.without), ("model+rules", &cmp.with)]).runtime()?)?;
    } else {
        out.write_json("rules/with.json", &cmp.with)?;
        out.write("rules/report.csv", report_csv(&[("model+rules", &cmp.with)]).runtime()?)?;
    }
    out.write("rules/per_rule.csv", rule_stats_csv(&cmp.per_rule).runtime()?)?;
    out.write_json("rules/conflicts.json", &cmp.conflicts)?;
    out.write("rules/errors.csv", errors_csv(&cmp.with).runtime()?)?;
    out.finish(ctx)
}

fn metric_rows(s: &mut String, x: &str, minority: usize, report: &EvalReport) {
    for label in Label::BOTH {
        let m = report.class(label);
        let _ = writeln!(s, "{x},{minority},{},{},{},{}", label.name(), m.precision, m.recall, m.f1);
    }
    let m = &report.macro_avg;
    let _ = writeln!(s, "{x},{minority},macro,{},{},{}", m.precision, m.recall, m.f1);
}

fn cmd_trend(ctx: &Ctx, by_method: bool) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let (train, test) = train_test(cfg)?;
    let plan = balance_plan(cfg, &train, cfg.seeds().balance);
    let label = plan.label_for(&train);
    let mut methods = parse_methods(&plan.source_methods)?;
    if by_method {
        methods.extend(parse_methods(&cfg.augment.methods)?);
    }
    let env = Env::new(cfg, &methods)?;
    let train_cfg = cfg.train_config();

    let mut gens = env.generators(cfg, &parse_methods(&plan.source_methods)?, &train)?;
    let refs: Vec<&mut dyn Generator> = gens.iter_mut().map(|g| g.as_mut() as &mut dyn Generator).collect();
    let (points, trace) = trend_experiment(&train, &test, &plan, refs, cfg.vocab.min_df, &train_cfg).runtime()?;

    let mut csv = String::from("round,minority_count,class,precision,recall,f1\n");
    for p in &points {
        metric_rows(&mut csv, &p.round.to_string(), p.class_count, &p.report);
    }
    let series: Vec<Series> = [(label, "minority F1"), (label.other(), "majority F1")]
        .into_iter()
        .map(|(l, name)| Series {
            name: name.into(),
            points: points.iter().map(|p| (p.class_count as f64, p.report.class(l).f1)).collect(),
        })
        .chain(std::iter::once(Series {
            name: "macro F1".into(),
            points: points.iter().map(|p| (p.class_count as f64, p.report.macro_avg.f1)).collect(),
        }))
        .collect();

    let mut out = Out::new(&cfg.out_dir, "trend");
    out.write("trend/trend.csv", csv)?;
    out.write("trend/trace.csv", trace.to_csv())?;
    out.write("trend/trend.svg", line_chart("F1 by minority count", "minority examples", "F1", &series))?;

    if by_method {
        let mut csv = String::from("method,minority_count,class,precision,recall,f1\n");
        let baseline = evaluate(&TfidfLinear::fit(&train, cfg.vocab.min_df, &train_cfg).runtime()?, &test).runtime()?;
        metric_rows(&mut csv, "none", train.class_count(label), &baseline);
        for id in &cfg.augment.methods {
            let single = BalancePlan { source_methods: vec![id.clone()], ..plan.clone() };
            let mut gens = env.generators(cfg, &parse_methods(&single.source_methods)?, &train)?;
            let refs: Vec<&mut dyn Generator> = gens.iter_mut().map(|g| g.as_mut() as &mut dyn Generator).collect();
            let mut b = Balancer::new(&train, single, refs).runtime()?;
            // A method whose candidates are all near-duplicates stops early;
            // the row then shows how far it got.
            loop {
                match b.step() {
                    Ok(Some(_)) => {}
                    Ok(None) | Err(rebalance::Error::Balance(BalanceError::GeneratorExhausted { .. })) => break,
                    Err(e) => return Err(e).runtime(),
                }
            }
            let count = b.count();
            let (grown, _) = b.finish().runtime()?;
            let report = evaluate(&TfidfLinear::fit(&grown, cfg.vocab.min_df, &train_cfg).runtime()?, &test).runtime()?;
            metric_rows(&mut csv, id, count, &report);
        }
        out.write("trend/by_method.csv", csv)?;
    }
    out.finish(ctx)
}

/// The config written next to a generated fixture set.
pub fn fixture_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    cfg.corpus.path = fixtures::CORPUS_FILE.into();
    cfg.augment.embeddings = Some(fixtures::EMBEDDINGS_FILE.into());
    cfg.augment.lexicon = Some(fixtures::LEXICON_FILE.into());
    cfg.llm.transcript = Some(fixtures::TRANSCRIPT_FILE.into());
    cfg.llm.prompts_dir = Some(fixtures::PROMPTS_DIR.into());
    cfg.rules.path = Some(fixtures::RULES_FILE.into());
    cfg.rules.corpus = Some(fixtures::RULES_CORPUS_FILE.into());
    cfg
}

fn cmd_fixtures(cli: &Cli, dir: Option<&Path>) -> Result<(), CliError> {
    let dir = dir.or(cli.out.as_deref()).unwrap_or(Path::new("fixtures"));
    let seed = cli.seed.unwrap_or(42);
    let mut written = fixtures::write_fixture_set(dir, seed).runtime()?;
    let cfg_path = dir.join(FIXTURE_CONFIG_FILE);
    fs::write(&cfg_path, fixture_config(seed).to_toml()).with_context(|| format!("cannot write {}", cfg_path.display())).runtime()?;
    written.push(cfg_path);
    println!("fixtures: wrote {} files to {}", written.len(), dir.display());
    Ok(())
}
