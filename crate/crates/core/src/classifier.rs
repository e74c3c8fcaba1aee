//! Linear classifier over TF-IDF features, trained by stochastic gradient
//! descent on an L2-regularized logistic or hinge loss.
//!
//! The objective is `(1/n) Σ loss(y_i, w·x_i + b) + (λ/2)‖w‖²` with labels
//! mapped to `y ∈ {-1, +1}`. Each SGD step takes a gradient step on one
//! example's loss and then applies the L2 proximal shrink `w / (1 + ηλ)`,
//! which stays stable for any λ. The step size decays as `η / √t`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Label};
use crate::seed;
use crate::textproc::{fit_vocabulary, tokenize, vectorize, SparseVector, TextError, VocabFingerprint, Vocabulary};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("training set contains a single class")]
    SingleClassTrainingSet,
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("document and model use different vocabularies")]
    VocabularyMismatch,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("model file {path}: {message}")]
    ModelFile { path: String, message: String },
    #[error(transparent)]
    Text(#[from] TextError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Logistic,
    Hinge,
}

impl LossKind {
    /// Loss at margin `y z`.
    pub fn loss(self, y: f64, z: f64) -> f64 {
        let m = y * z;
        match self {
            LossKind::Logistic => softplus(-m),
            LossKind::Hinge => (1.0 - m).max(0.0),
        }
    }

    /// Derivative of the loss with respect to `z` (a subgradient for hinge,
    /// taking 0 at the kink).
    pub fn dloss(self, y: f64, z: f64) -> f64 {
        match self {
            LossKind::Logistic => -y * sigmoid(-y * z),
            LossKind::Hinge => {
                if y * z < 1.0 {
                    -y
                } else {
                    0.0
                }
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub l2_lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub decision_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_kind: LossKind::Logistic,
            l2_lambda: 1e-4,
            learning_rate: 0.1,
            epochs: 20,
            seed: 42,
            decision_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: String| Err(ClassifierError::InvalidConfig(m));
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad(format!("l2_lambda {} must be finite and >= 0", self.l2_lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return bad(format!("decision_threshold {} outside (0, 1)", self.decision_threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub loss_kind: LossKind,
    pub vocab_fingerprint: VocabFingerprint,
    pub train_config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    loss_kind: LossKind,
    bias: f64,
    dim: usize,
    weights: BTreeMap<usize, f64>,
    vocab_fingerprint: VocabFingerprint,
    train_config: Option<TrainConfig>,
}

impl LinearModel {
    pub fn zeros(dim: usize, loss_kind: LossKind, vocab_fingerprint: VocabFingerprint) -> Self {
        LinearModel {
            weights: vec![0.0; dim],
            bias: 0.0,
            loss_kind,
            vocab_fingerprint,
            train_config: None,
        }
    }

    /// Hinge-trained scores pass through the sigmoid too, but are not
    /// probabilities in any calibrated sense.
    pub fn is_calibrated(&self) -> bool {
        self.loss_kind == LossKind::Logistic
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn decision_value(&self, doc: &SparseVector) -> Result<f64, ClassifierError> {
        if doc.fingerprint() != self.vocab_fingerprint {
            return Err(ClassifierError::VocabularyMismatch);
        }
        Ok(self.raw_decision(doc))
    }

    fn raw_decision(&self, doc: &SparseVector) -> f64 {
        doc.entries().iter().map(|&(i, x)| self.weights[i] * x).sum::<f64>() + self.bias
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            loss_kind: self.loss_kind,
            bias: self.bias,
            dim: self.weights.len(),
            weights: self
                .weights
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(i, &w)| (i, w))
                .collect(),
            vocab_fingerprint: self.vocab_fingerprint,
            train_config: self.train_config,
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, String> {
        let file: ModelFile = serde_json::from_str(json).map_err(|e| e.to_string())?;
        let mut weights = vec![0.0; file.dim];
        for (i, w) in file.weights {
            if i >= file.dim || !w.is_finite() {
                return Err(format!("bad weight entry {i}: {w}"));
            }
            weights[i] = w;
        }
        if !file.bias.is_finite() {
            return Err("non-finite bias".into());
        }
        Ok(LinearModel {
            weights,
            bias: file.bias,
            loss_kind: file.loss_kind,
            vocab_fingerprint: file.vocab_fingerprint,
            train_config: file.train_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        fs::write(path, self.to_json()).map_err(|e| ClassifierError::ModelFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        let err = |message: String| ClassifierError::ModelFile {
            path: path.display().to_string(),
            message,
        };
        let json = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        LinearModel::from_json(&json).map_err(err)
    }
}

/// Mean loss over the batch plus the L2 penalty.
pub fn objective(model: &LinearModel, batch: &[(SparseVector, Label)], l2_lambda: f64) -> Result<f64, ClassifierError> {
    if batch.is_empty() {
        return Err(ClassifierError::EmptyBatch);
    }
    let mut total = 0.0;
    for (x, y) in batch {
        total += model.loss_kind.loss(y.sign(), model.decision_value(x)?);
    }
    let norm2: f64 = model.weights.iter().map(|w| w * w).sum();
    Ok(total / batch.len() as f64 + 0.5 * l2_lambda * norm2)
}

/// Analytic gradient of [`objective`] with respect to (weights, bias).
pub fn gradient(
    model: &LinearModel,
    batch: &[(SparseVector, Label)],
    l2_lambda: f64,
) -> Result<(Vec<f64>, f64), ClassifierError> {
    if batch.is_empty() {
        return Err(ClassifierError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut gw: Vec<f64> = model.weights.iter().map(|w| l2_lambda * w).collect();
    let mut gb = 0.0;
    for (x, y) in batch {
        let d = model.loss_kind.dloss(y.sign(), model.decision_value(x)?) / n;
        for &(i, v) in x.entries() {
            gw[i] += d * v;
        }
        gb += d;
    }
    Ok((gw, gb))
}

/// Trains on pre-vectorized examples. Examples are visited in a fresh seeded
/// permutation each epoch; the loop is sequential so results are bitwise
/// reproducible.
pub fn fit(
    data: &[(SparseVector, Label)],
    dim: usize,
    fingerprint: VocabFingerprint,
    cfg: &TrainConfig,
) -> Result<LinearModel, ClassifierError> {
    cfg.validate()?;
    let has = |l: Label| data.iter().any(|(_, y)| *y == l);
    if !has(Label::Positive) || !has(Label::Negative) {
        return Err(ClassifierError::SingleClassTrainingSet);
    }
    if data.iter().any(|(x, _)| x.fingerprint() != fingerprint) {
        return Err(ClassifierError::VocabularyMismatch);
    }

    // w = scale * v, so the shrink step is O(1).
    let mut v = vec![0.0f64; dim];
    let mut scale = 1.0f64;
    let mut bias = 0.0f64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = seed::derived_rng(cfg.seed, "sgd");
    let mut t = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &k in &order {
            t += 1;
            let eta = cfg.learning_rate / (t as f64).sqrt();
            let (x, y) = &data[k];
            let z = scale * x.entries().iter().map(|&(i, xi)| v[i] * xi).sum::<f64>() + bias;
            let d = cfg.loss_kind.dloss(y.sign(), z);
            if d != 0.0 {
                for &(i, xi) in x.entries() {
                    v[i] -= eta * d * xi / scale;
                }
                bias -= eta * d;
            }
            scale /= 1.0 + eta * cfg.l2_lambda;
            if scale < 1e-9 {
                v.iter_mut().for_each(|w| *w *= scale);
                scale = 1.0;
            }
        }
        let finite = bias.is_finite() && scale.is_finite() && v.iter().all(|w| w.is_finite());
        if !finite {
            return Err(ClassifierError::NonFiniteLoss { epoch });
        }
    }
    let model = LinearModel {
        weights: v.into_iter().map(|w| w * scale).collect(),
        bias,
        loss_kind: cfg.loss_kind,
        vocab_fingerprint: fingerprint,
        train_config: Some(*cfg),
    };
    if !objective(&model, data, cfg.l2_lambda)?.is_finite() {
        return Err(ClassifierError::NonFiniteLoss { epoch: cfg.epochs - 1 });
    }
    Ok(model)
}

pub fn featurize(corpus: &Corpus, vocab: &Vocabulary) -> Vec<(SparseVector, Label)> {
    corpus
        .examples()
        .iter()
        .map(|e| (vectorize(&tokenize(&e.text), vocab), e.label))
        .collect()
}

/// Trains on `train`, vectorizing its texts with `vocab`.
pub fn train(train: &Corpus, vocab: &Vocabulary, cfg: &TrainConfig) -> Result<LinearModel, ClassifierError> {
    fit(&featurize(train, vocab), vocab.len(), vocab.fingerprint(), cfg)
}

/// `σ(w·x + b)`.
pub fn predict_proba(model: &LinearModel, doc: &SparseVector) -> Result<f64, ClassifierError> {
    Ok(sigmoid(model.decision_value(doc)?))
}

/// Positive iff the probability reaches the threshold (inclusive).
pub fn predict(model: &LinearModel, doc: &SparseVector, threshold: f64) -> Result<Label, ClassifierError> {
    Ok(label_for(predict_proba(model, doc)?, threshold))
}

pub fn label_for(proba: f64, threshold: f64) -> Label {
    if proba >= threshold {
        Label::Positive
    } else {
        Label::Negative
    }
}

/// Anything that can score raw (normalized) text. Rule post-processing and
/// evaluation only depend on this.
pub trait TextClassifier {
    fn predict_proba_text(&self, text: &str) -> Result<f64, ClassifierError>;
    fn threshold(&self) -> f64;

    fn predict_text(&self, text: &str) -> Result<Label, ClassifierError> {
        Ok(label_for(self.predict_proba_text(text)?, self.threshold()))
    }
}

/// A vocabulary and a linear model trained against it.
#[derive(Debug, Clone)]
pub struct TfidfLinear {
    pub vocab: Vocabulary,
    pub model: LinearModel,
    pub threshold: f64,
}

impl TfidfLinear {
    /// Fits the vocabulary on the training texts, then trains the model.
    pub fn fit(corpus: &Corpus, min_df: usize, cfg: &TrainConfig) -> Result<Self, ClassifierError> {
        let docs: Vec<_> = corpus.examples().iter().map(|e| tokenize(&e.text)).collect();
        let vocab = fit_vocabulary(&docs, min_df)?;
        let model = train(corpus, &vocab, cfg)?;
        Ok(TfidfLinear {
            vocab,
            model,
            threshold: cfg.decision_threshold,
        })
    }

    pub fn new(vocab: Vocabulary, model: LinearModel, threshold: f64) -> Result<Self, ClassifierError> {
        if vocab.fingerprint() != model.vocab_fingerprint || vocab.len() != model.weights.len() {
            return Err(ClassifierError::VocabularyMismatch);
        }
        Ok(TfidfLinear { vocab, model, threshold })
    }
}

impl TextClassifier for TfidfLinear {
    fn predict_proba_text(&self, text: &str) -> Result<f64, ClassifierError> {
        predict_proba(&self.model, &vectorize(&tokenize(text), &self.vocab))
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabeledExample;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy() -> Corpus {
        Corpus::new(vec![
            LabeledExample::original("g", "good good", Label::Positive),
            LabeledExample::original("b", "bad bad", Label::Negative),
        ])
        .unwrap()
    }

    fn fp() -> VocabFingerprint {
        VocabFingerprint(1)
    }

    #[test]
    fn separable_pair_is_learned() {
        let c = toy();
        let clf = TfidfLinear::fit(&c, 1, &TrainConfig { epochs: 200, learning_rate: 1.0, ..TrainConfig::default() }).unwrap();
        for ex in c.examples() {
            assert_eq!(clf.predict_text(&ex.text).unwrap(), ex.label);
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let c = toy();
        let cfg = TrainConfig::default();
        let a = TfidfLinear::fit(&c, 1, &cfg).unwrap();
        let b = TfidfLinear::fit(&c, 1, &cfg).unwrap();
        assert_eq!(a.model.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>(),
                   b.model.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.model.bias.to_bits(), b.model.bias.to_bits());
    }

    #[test]
    fn huge_l2_shrinks_weights_to_zero() {
        let mut examples = Vec::new();
        for i in 0..6 {
            examples.push(LabeledExample::original(format!("p{i}"), format!("good day {i}"), Label::Positive));
        }
        examples.push(LabeledExample::original("n", "bad day", Label::Negative));
        let c = Corpus::new(examples).unwrap();
        let clf = TfidfLinear::fit(&c, 1, &TrainConfig { l2_lambda: 1e6, ..TrainConfig::default() }).unwrap();
        assert!(clf.model.weight_norm() < 1e-4, "{}", clf.model.weight_norm());
        // only the bias is left, so every text gets the same label
        let p1 = clf.predict_proba_text("good").unwrap();
        let p2 = clf.predict_proba_text("bad").unwrap();
        assert!((p1 - p2).abs() < 1e-4);
        assert!((p1 - sigmoid(clf.model.bias)).abs() < 1e-4);
    }

    #[test]
    fn single_class_is_rejected() {
        let c = Corpus::new(vec![LabeledExample::original("g", "good", Label::Positive)]).unwrap();
        assert!(matches!(TfidfLinear::fit(&c, 1, &TrainConfig::default()), Err(ClassifierError::SingleClassTrainingSet)));
    }

    #[test]
    fn divergence_is_reported() {
        let data = vec![
            (SparseVector::from_entries(fp(), vec![(0, 1e300)]), Label::Positive),
            (SparseVector::from_entries(fp(), vec![(0, -1e300)]), Label::Positive),
            (SparseVector::from_entries(fp(), vec![(0, 1e300)]), Label::Negative),
        ];
        let cfg = TrainConfig { loss_kind: LossKind::Hinge, learning_rate: 1e300, ..TrainConfig::default() };
        assert!(matches!(fit(&data, 1, fp(), &cfg), Err(ClassifierError::NonFiniteLoss { .. })));
    }

    #[test]
    fn proba_examples() {
        let m = LinearModel::zeros(2, LossKind::Logistic, fp());
        let x = SparseVector::from_entries(fp(), vec![(0, 0.3)]);
        assert_eq!(predict_proba(&m, &x).unwrap(), 0.5);

        let mut m = LinearModel::zeros(1, LossKind::Logistic, fp());
        m.weights[0] = 1.0;
        let x = SparseVector::from_entries(fp(), vec![(0, 1.0)]);
        // 1 / (1 + e^-1)
        assert!((predict_proba(&m, &x).unwrap() - 0.7310585786300049).abs() < 1e-12);

        m.bias = 1e6;
        assert_eq!(predict_proba(&m, &x).unwrap(), 1.0);
        m.bias = -1e6;
        assert_eq!(predict_proba(&m, &x).unwrap(), 0.0);

        let other = SparseVector::from_entries(VocabFingerprint(2), vec![(0, 1.0)]);
        assert!(matches!(predict_proba(&m, &other), Err(ClassifierError::VocabularyMismatch)));
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        assert_eq!(label_for(0.5, 0.5), Label::Positive);
        assert_eq!(label_for(0.49, 0.5), Label::Negative);
        assert_eq!(label_for(0.0, 0.0), Label::Positive);
        let m = LinearModel::zeros(1, LossKind::Hinge, fp());
        assert!(!m.is_calibrated());
        let x = SparseVector::from_entries(fp(), vec![]);
        assert_eq!(predict(&m, &x, 0.5).unwrap(), Label::Positive);
    }

    #[test]
    fn empty_batch() {
        let m = LinearModel::zeros(1, LossKind::Logistic, fp());
        assert!(matches!(gradient(&m, &[], 0.0), Err(ClassifierError::EmptyBatch)));
    }

    #[test]
    fn symmetric_batch_has_zero_bias_gradient() {
        let m = LinearModel::zeros(2, LossKind::Logistic, fp());
        let batch = vec![
            (SparseVector::from_entries(fp(), vec![(0, 1.0)]), Label::Positive),
            (SparseVector::from_entries(fp(), vec![(1, 1.0)]), Label::Negative),
        ];
        let (_, gb) = gradient(&m, &batch, 0.1).unwrap();
        assert_eq!(gb, 0.0);
    }

    #[test]
    fn model_json_round_trip() {
        let c = toy();
        let clf = TfidfLinear::fit(&c, 1, &TrainConfig::default()).unwrap();
        let back = LinearModel::from_json(&clf.model.to_json()).unwrap();
        assert_eq!(back, clf.model);
    }

    #[test]
    fn full_batch_descent_decreases_objective() {
        let mut rng = seed::rng(11);
        let batch: Vec<(SparseVector, Label)> = (0..20)
            .map(|_| {
                let entries = (0..4).map(|i| (i, rng.random_range(0.0..1.0))).collect();
                let y = if rng.random_bool(0.5) { Label::Positive } else { Label::Negative };
                (SparseVector::from_entries(fp(), entries), y)
            })
            .collect();
        let mut m = LinearModel::zeros(4, LossKind::Logistic, fp());
        let mut prev = objective(&m, &batch, 0.01).unwrap();
        for _ in 0..50 {
            let (gw, gb) = gradient(&m, &batch, 0.01).unwrap();
            let gnorm: f64 = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
            if gnorm < 1e-12 {
                break;
            }
            m.weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= 0.1 * g);
            m.bias -= 0.1 * gb;
            let now = objective(&m, &batch, 0.01).unwrap();
            assert!(now < prev);
            prev = now;
        }
    }

    proptest! {
        #[test]
        fn predict_is_invariant_under_monotone_recalibration(z in -5.0f64..5.0, t in 0.05f64..0.95) {
            // g(p) = p^a for a > 0 is strictly monotone; recalibrating both p and t keeps the decision
            let p = sigmoid(z);
            for a in [0.5, 2.0, 3.0] {
                prop_assert_eq!(label_for(p, t), label_for(p.powf(a), t.powf(a)));
            }
        }
    }
}
