//! Grows one class of a training corpus toward a target size in rounds of
//! generated variants, rejecting near duplicates.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_one, AugmentError, AugmentMethod, AugmentResources, AugmenterConfig};
use crate::classifier::{TfidfLinear, TrainConfig};
use crate::corpus::{Corpus, Label, LabeledExample, Origin};
use crate::eval::{evaluate, EvalReport};
use crate::llm_augment::{generate_many, LlmConfig, PromptPattern, Transport};
use crate::seed;
use crate::textproc::{tokenize, TermCounts};

#[derive(Debug, Error)]
pub enum BalanceError {
    #[error("invalid balance plan: {0}")]
    InvalidPlan(String),
    #[error("round {round}: every generated candidate was rejected")]
    GeneratorExhausted { round: usize },
    #[error("no generator registered for method {0}")]
    UnknownMethod(String),
    #[error("generator {id} returned {found} candidate lists for {expected} sources")]
    GeneratorContract { id: String, expected: usize, found: usize },
    #[error("test set contains augmented example {0}")]
    AugmentedTestExample(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    DoubleEachRound,
    FillInOneRound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalancePlan {
    pub target_count: usize,
    /// Class to grow; the training minority when unset.
    #[serde(default)]
    pub target_label: Option<Label>,
    pub schedule: Schedule,
    pub dedup_threshold: f64,
    pub max_rounds: usize,
    pub source_methods: Vec<String>,
    pub seed: u64,
}

impl BalancePlan {
    /// Doubling toward the training majority count, deduplicated at 0.95.
    pub fn to_parity(train: &Corpus, source_methods: Vec<String>, seed: u64) -> BalancePlan {
        BalancePlan {
            target_count: train.class_count(train.majority_label()),
            target_label: None,
            schedule: Schedule::DoubleEachRound,
            dedup_threshold: 0.95,
            max_rounds: 10,
            source_methods,
            seed,
        }
    }

    pub fn label_for(&self, train: &Corpus) -> Label {
        self.target_label.unwrap_or_else(|| train.minority_label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub before: usize,
    pub generated: usize,
    pub kept: usize,
    pub after: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceTrace {
    pub rounds: Vec<RoundTrace>,
}

impl BalanceTrace {
    /// `round,before,generated,kept,after`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rounds.is_empty() {
            w.write_record(["round", "before", "generated", "kept", "after"]).expect("write to memory");
        }
        for r in &self.rounds {
            w.serialize(r).expect("write to memory");
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8")
    }
}

/// A source of candidate texts for a batch of source examples.
pub trait Generator {
    fn id(&self) -> &str;

    /// Candidate texts for each source, in source order. An empty list means
    /// the source yielded nothing.
    fn generate(&mut self, sources: &[LabeledExample], seed: u64) -> Result<Vec<Vec<String>>, crate::Error>;
}

/// One of the token-level operators, offering a few differently seeded
/// candidates per source.
pub struct TraditionalGenerator<'r> {
    config: AugmenterConfig,
    resources: &'r AugmentResources,
    candidates: usize,
}

impl<'r> TraditionalGenerator<'r> {
    pub fn new(config: AugmenterConfig, resources: &'r AugmentResources) -> Result<Self, AugmentError> {
        config.validate()?;
        Ok(TraditionalGenerator { config, resources, candidates: 3 })
    }

    pub fn with_candidates(mut self, n: usize) -> Self {
        self.candidates = n.max(1);
        self
    }

    pub fn for_method(method: AugmentMethod, resources: &'r AugmentResources) -> Result<Self, AugmentError> {
        TraditionalGenerator::new(AugmenterConfig::new(method, 0), resources)
    }
}

impl Generator for TraditionalGenerator<'_> {
    fn id(&self) -> &str {
        self.config.method.id()
    }

    fn generate(&mut self, sources: &[LabeledExample], seed: u64) -> Result<Vec<Vec<String>>, crate::Error> {
        sources
            .iter()
            .map(|s| {
                let doc = tokenize(&s.text);
                let mut out = Vec::with_capacity(self.candidates);
                for k in 0..self.candidates {
                    let cfg = AugmenterConfig { seed: seed::derive_seed(seed, &format!("{}#{k}", s.id)), ..self.config.clone() };
                    match augment_one(&doc, &cfg, self.resources) {
                        Ok(aug) => out.push(aug.to_text()),
                        Err(AugmentError::NoEligibleToken(_) | AugmentError::EmptyDocument) => break,
                        Err(e) => return Err(e.into()),
                    }
                }
                Ok(out)
            })
            .collect()
    }
}

/// Paraphrases through a prompt pattern. Requests always carry the root
/// original text, so a replayed transcript of the originals covers every
/// round; repeated requests return the same candidates and dedup moves on to
/// the next unused one.
pub struct LlmGenerator<'a> {
    pattern: PromptPattern,
    config: LlmConfig,
    transport: Transport<'a>,
    originals: BTreeMap<String, LabeledExample>,
}

impl<'a> LlmGenerator<'a> {
    pub fn new(pattern: PromptPattern, config: LlmConfig, transport: Transport<'a>, train: &Corpus) -> Self {
        let originals = train
            .examples()
            .iter()
            .filter(|e| matches!(e.origin, Origin::Original))
            .map(|e| (e.id.clone(), e.clone()))
            .collect();
        LlmGenerator { pattern, config, transport, originals }
    }
}

impl Generator for LlmGenerator<'_> {
    fn id(&self) -> &str {
        self.pattern.pattern_id.id()
    }

    fn generate(&mut self, sources: &[LabeledExample], _seed: u64) -> Result<Vec<Vec<String>>, crate::Error> {
        let requests: Vec<_> = sources
            .iter()
            .map(|s| {
                let root = self.originals.get(s.root_id()).unwrap_or(s);
                self.config.request(&self.pattern, root)
            })
            .collect();
        generate_many(&requests, &self.transport, self.config.max_concurrency)
            .into_iter()
            .map(|r| Ok(r?.into_iter().map(|rec| rec.augmented_text).collect()))
            .collect()
    }
}

/// Round-by-round balancing state.
pub struct Balancer<'g> {
    plan: BalancePlan,
    label: Label,
    examples: Vec<LabeledExample>,
    kept: Vec<TermCounts>,
    count: usize,
    generators: BTreeMap<String, &'g mut dyn Generator>,
    trace: BalanceTrace,
    exhausted: bool,
}

impl<'g> Balancer<'g> {
    pub fn new(
        train: &Corpus,
        plan: BalancePlan,
        generators: Vec<&'g mut dyn Generator>,
    ) -> Result<Self, crate::Error> {
        if train.class_count(Label::Positive) == 0 || train.class_count(Label::Negative) == 0 {
            return Err(BalanceError::InvalidPlan("training corpus must contain both classes".into()).into());
        }
        let label = plan.label_for(train);
        let count = train.class_count(label);
        if plan.target_count <= count {
            return Err(BalanceError::InvalidPlan(format!(
                "target {} does not exceed current count {count}",
                plan.target_count
            ))
            .into());
        }
        if !(plan.dedup_threshold > 0.0 && plan.dedup_threshold <= 1.0) {
            return Err(BalanceError::InvalidPlan(format!("dedup_threshold {} outside (0, 1]", plan.dedup_threshold)).into());
        }
        if plan.source_methods.is_empty() {
            return Err(BalanceError::InvalidPlan("no source methods".into()).into());
        }
        let generators: BTreeMap<String, &'g mut dyn Generator> =
            generators.into_iter().map(|g| (g.id().to_string(), g)).collect();
        for m in &plan.source_methods {
            if !generators.contains_key(m) {
                return Err(BalanceError::UnknownMethod(m.clone()).into());
            }
        }
        let kept = train
            .examples()
            .iter()
            .filter(|e| e.label == label)
            .map(|e| TermCounts::new(&e.text))
            .collect();
        Ok(Balancer {
            plan,
            label,
            examples: train.examples().to_vec(),
            kept,
            count,
            generators,
            trace: BalanceTrace::default(),
            exhausted: false,
        })
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn trace(&self) -> &BalanceTrace {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.exhausted || self.count >= self.plan.target_count || self.trace.rounds.len() >= self.plan.max_rounds
    }

    pub fn corpus(&self) -> Result<Corpus, crate::Error> {
        Ok(Corpus::new(self.examples.clone())?)
    }

    /// Runs one round. Returns `None` once the plan is complete.
    pub fn step(&mut self) -> Result<Option<RoundTrace>, crate::Error> {
        if self.is_done() {
            return Ok(None);
        }
        let round = self.trace.rounds.len() + 1;
        let round_seed = seed::derive_seed(self.plan.seed, &format!("round{round}"));
        let remaining = self.plan.target_count - self.count;
        let want = match self.plan.schedule {
            Schedule::DoubleEachRound => self.count.min(remaining),
            Schedule::FillInOneRound => remaining,
        };

        let mut pool: Vec<usize> = (0..self.examples.len()).filter(|&i| self.examples[i].label == self.label).collect();
        pool.shuffle(&mut seed::derived_rng(round_seed, "sources"));
        let mut next_source = pool.iter().copied().cycle();

        let methods = self.plan.source_methods.clone();
        let before = self.count;
        let mut generated = 0;
        let mut kept = 0;
        let mut slot = 0;
        // Sources whose candidates are all rejected are replaced by fresh ones,
        // up to one extra sweep of the pool.
        let budget = want + pool.len();
        while kept < want && slot < budget {
            let take = (want - kept).min(budget - slot);
            let sources: Vec<usize> = next_source.by_ref().take(take).collect();
            let pass_seed = if slot == 0 { round_seed } else { seed::derive_seed(round_seed, &format!("slot{slot}")) };
            let candidates = self.candidates_for(&sources, slot, pass_seed)?;
            for (i, cands) in candidates.into_iter().enumerate() {
                let j = slot + i;
                let parent = &self.examples[sources[i]];
                let root = parent.root_id().to_string();
                let method = methods[j % methods.len()].clone();
                for text in cands {
                    generated += 1;
                    let tc = TermCounts::new(&text);
                    if text.trim().is_empty() || !self.is_novel(&tc) {
                        continue;
                    }
                    self.kept.push(tc);
                    self.examples.push(LabeledExample {
                        id: format!("{root}~r{round}.{j}"),
                        text,
                        label: self.label,
                        origin: Origin::Augmented { method_id: method, parent_id: root },
                    });
                    kept += 1;
                    break;
                }
            }
            slot += take;
        }
        self.count += kept;
        let trace = RoundTrace { round, before, generated, kept, after: self.count };
        self.trace.rounds.push(trace);
        if kept == 0 {
            self.exhausted = true;
            return Err(BalanceError::GeneratorExhausted { round }.into());
        }
        Ok(Some(trace))
    }

    fn candidates_for(&mut self, sources: &[usize], offset: usize, pass_seed: u64) -> Result<Vec<Vec<String>>, crate::Error> {
        let methods = &self.plan.source_methods;
        let mut by_method: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for i in 0..sources.len() {
            by_method.entry(methods[(offset + i) % methods.len()].clone()).or_default().push(i);
        }
        let mut candidates: Vec<Vec<String>> = vec![Vec::new(); sources.len()];
        for (method, slots) in &by_method {
            let batch: Vec<LabeledExample> = slots.iter().map(|&i| self.examples[sources[i]].clone()).collect();
            let generator = self.generators.get_mut(method.as_str()).expect("checked in new");
            let out = generator.generate(&batch, seed::derive_seed(pass_seed, method))?;
            if out.len() != batch.len() {
                return Err(BalanceError::GeneratorContract { id: method.clone(), expected: batch.len(), found: out.len() }.into());
            }
            for (&i, c) in slots.iter().zip(out) {
                candidates[i] = c;
            }
        }
        Ok(candidates)
    }

    fn is_novel(&self, tc: &TermCounts) -> bool {
        self.kept.iter().all(|k| k.similarity(tc) < self.plan.dedup_threshold)
    }

    pub fn finish(self) -> Result<(Corpus, BalanceTrace), crate::Error> {
        Ok((Corpus::new(self.examples)?, self.trace))
    }
}

pub fn balance(
    train: &Corpus,
    plan: &BalancePlan,
    generators: Vec<&mut dyn Generator>,
) -> Result<(Corpus, BalanceTrace), crate::Error> {
    let mut b = Balancer::new(train, plan.clone(), generators)?;
    while b.step()?.is_some() {}
    b.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub round: usize,
    pub class_count: usize,
    pub report: EvalReport,
}

/// Trains and evaluates after every balancing round, starting with the
/// unaugmented baseline as round 0.
pub fn trend_experiment(
    train: &Corpus,
    test: &Corpus,
    plan: &BalancePlan,
    generators: Vec<&mut dyn Generator>,
    min_df: usize,
    cfg: &TrainConfig,
) -> Result<(Vec<TrendPoint>, BalanceTrace), crate::Error> {
    if let Some(e) = test.examples().iter().find(|e| e.is_augmented()) {
        return Err(BalanceError::AugmentedTestExample(e.id.clone()).into());
    }
    let mut b = Balancer::new(train, plan.clone(), generators)?;
    let fit_eval = |corpus: &Corpus| -> Result<EvalReport, crate::Error> {
        evaluate(&TfidfLinear::fit(corpus, min_df, cfg)?, test)
    };
    let mut points = vec![TrendPoint { round: 0, class_count: b.count(), report: fit_eval(train)? }];
    while let Some(r) = b.step()? {
        points.push(TrendPoint { round: r.round, class_count: r.after, report: fit_eval(&b.corpus()?)? });
    }
    let (_, trace) = b.finish()?;
    Ok((points, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Appends a counter word, so every candidate is new.
    struct Unique {
        n: usize,
    }

    impl Generator for Unique {
        fn id(&self) -> &str {
            "unique"
        }
        fn generate(&mut self, sources: &[LabeledExample], _: u64) -> Result<Vec<Vec<String>>, crate::Error> {
            Ok(sources
                .iter()
                .map(|s| {
                    self.n += 1;
                    vec![format!("{} w{}", s.text, self.n)]
                })
                .collect())
        }
    }

    struct Echo;

    impl Generator for Echo {
        fn id(&self) -> &str {
            "echo"
        }
        fn generate(&mut self, sources: &[LabeledExample], _: u64) -> Result<Vec<Vec<String>>, crate::Error> {
            Ok(sources.iter().map(|s| vec![s.text.clone()]).collect())
        }
    }

    fn corpus(neg: usize, pos: usize) -> Corpus {
        let mut ex = Vec::new();
        for i in 0..pos {
            ex.push(LabeledExample::original(format!("p{i}"), format!("healthy baby born {i}"), Label::Positive));
        }
        for i in 0..neg {
            ex.push(LabeledExample::original(format!("n{i}"), format!("sad loss today {i}"), Label::Negative));
        }
        Corpus::new(ex).unwrap()
    }

    fn plan(target: usize, threshold: f64, method: &str) -> BalancePlan {
        BalancePlan {
            target_count: target,
            target_label: None,
            schedule: Schedule::DoubleEachRound,
            dedup_threshold: threshold,
            max_rounds: 10,
            source_methods: vec![method.into()],
            seed: 7,
        }
    }

    #[test]
    fn doubling_lands_on_target() {
        let c = corpus(122, 946);
        let mut g = Unique { n: 0 };
        let (out, trace) = balance(&c, &plan(777, 1.0, "unique"), vec![&mut g]).unwrap();
        let counts: Vec<usize> = std::iter::once(122).chain(trace.rounds.iter().map(|r| r.after)).collect();
        assert_eq!(counts, vec![122, 244, 488, 777]);
        assert_eq!(trace.rounds[2].kept, 289);
        assert_eq!(out.class_count(Label::Negative), 777);
        for e in out.examples().iter().filter(|e| e.is_augmented()) {
            let parent = out.get(e.root_id()).unwrap();
            assert!(!parent.is_augmented());
            assert_eq!(parent.label, Label::Negative);
        }
        let csv = trace.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "round,before,generated,kept,after");
        assert_eq!(csv.lines().nth(3).unwrap(), "3,488,289,289,777");
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn fill_in_one_round() {
        let c = corpus(3, 10);
        let mut g = Unique { n: 0 };
        let p = BalancePlan { schedule: Schedule::FillInOneRound, ..plan(10, 1.0, "unique") };
        let (out, trace) = balance(&c, &p, vec![&mut g]).unwrap();
        assert_eq!(trace.rounds.len(), 1);
        assert_eq!(out.class_count(Label::Negative), 10);
    }

    #[test]
    fn echo_is_exhausted() {
        let c = corpus(3, 10);
        let mut g = Echo;
        let err = balance(&c, &plan(6, 1.0, "echo"), vec![&mut g]).unwrap_err();
        assert!(matches!(err, crate::Error::Balance(BalanceError::GeneratorExhausted { round: 1 })));
    }

    #[test]
    fn plan_preconditions() {
        let c = corpus(3, 10);
        let mut g = Unique { n: 0 };
        assert!(matches!(
            Balancer::new(&c, plan(3, 1.0, "unique"), vec![&mut g]),
            Err(crate::Error::Balance(BalanceError::InvalidPlan(_)))
        ));
        let mut g = Unique { n: 0 };
        assert!(matches!(
            Balancer::new(&c, plan(6, 1.0, "other"), vec![&mut g]),
            Err(crate::Error::Balance(BalanceError::UnknownMethod(_)))
        ));
    }

    #[test]
    fn kept_candidates_are_below_threshold() {
        let c = corpus(5, 20);
        let mut g = Unique { n: 0 };
        let (out, _) = balance(&c, &plan(20, 0.9, "unique"), vec![&mut g]).unwrap_or_else(|e| panic!("{e}"));
        let neg: Vec<&LabeledExample> = out.examples().iter().filter(|e| e.label == Label::Negative).collect();
        for (i, a) in neg.iter().enumerate() {
            for b in &neg[..i] {
                if a.is_augmented() {
                    assert!(TermCounts::new(&a.text).similarity(&TermCounts::new(&b.text)) < 0.9);
                }
            }
        }
    }

    #[test]
    fn zero_round_trend_is_baseline() {
        let c = corpus(6, 20);
        let test = corpus(2, 4);
        let mut g = Unique { n: 0 };
        let p = BalancePlan { max_rounds: 0, ..plan(20, 1.0, "unique") };
        let (points, trace) = trend_experiment(&c, &test, &p, vec![&mut g], 1, &TrainConfig::default()).unwrap();
        assert_eq!(points.len(), 1);
        assert_eq!(points.len(), trace.rounds.len() + 1);
        let base = evaluate(&TfidfLinear::fit(&c, 1, &TrainConfig::default()).unwrap(), &test).unwrap();
        assert_eq!(points[0].report, base);
    }
}
