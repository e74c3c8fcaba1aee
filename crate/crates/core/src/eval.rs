//! Confusion counts, per-class and averaged metrics, error listings and
//! k-fold cross-validation.
//!
//! Any metric whose denominator is zero is reported as 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{TextClassifier, TfidfLinear, TrainConfig};
use crate::corpus::{Corpus, FoldPlan, Label};
use crate::rules::RuleSet;
use crate::textproc::normalize;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    LengthMismatch { what: &'static str, expected: usize, found: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same counts with `label` treated as the positive class.
    pub fn viewed_as(&self, label: Label) -> ConfusionCounts {
        match label {
            Label::Positive => *self,
            Label::Negative => ConfusionCounts {
                tp: self.tn,
                fp: self.fn_,
                fn_: self.fp,
                tn: self.tp,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Counts with label 1 as the positive class.
pub fn confusion(truth: &[Label], pred: &[Label]) -> Result<ConfusionCounts, EvalError> {
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    if truth.len() != pred.len() {
        return Err(EvalError::LengthMismatch { what: "predictions", expected: truth.len(), found: pred.len() });
    }
    let mut c = ConfusionCounts::default();
    for (t, p) in truth.iter().zip(pred) {
        match (t, p) {
            (Label::Positive, Label::Positive) => c.tp += 1,
            (Label::Negative, Label::Positive) => c.fp += 1,
            (Label::Positive, Label::Negative) => c.fn_ += 1,
            (Label::Negative, Label::Negative) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    Metrics {
        precision,
        recall,
        f1: f1_of(precision, recall),
        accuracy: ratio(c.tp + c.tn, c.total()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averaged {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEntry {
    pub id: String,
    pub text: String,
    #[serde(rename = "true")]
    pub truth: Label,
    #[serde(rename = "pred")]
    pub predicted: Label,
    pub fired_rule: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by class name ("negative", "positive").
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub accuracy: f64,
    pub micro: Averaged,
    #[serde(rename = "macro")]
    pub macro_avg: Averaged,
    pub confusion: ConfusionCounts,
    pub errors: Vec<ErrorEntry>,
}

impl EvalReport {
    pub fn class(&self, label: Label) -> &ClassMetrics {
        &self.per_class[label.name()]
    }

    pub fn headline(&self) -> Headline {
        let neg = self.class(Label::Negative);
        let pos = self.class(Label::Positive);
        Headline {
            accuracy: self.accuracy,
            micro_f1: self.micro.f1,
            macro_precision: self.macro_avg.precision,
            macro_recall: self.macro_avg.recall,
            macro_f1: self.macro_avg.f1,
            negative_precision: neg.precision,
            negative_recall: neg.recall,
            negative_f1: neg.f1,
            positive_precision: pos.precision,
            positive_recall: pos.recall,
            positive_f1: pos.f1,
        }
    }
}

pub fn full_report(truth: &[Label], pred: &[Label], texts: &[String], ids: &[String]) -> Result<EvalReport, EvalError> {
    full_report_with_rules(truth, pred, texts, ids, None)
}

/// Like [`full_report`], annotating each error with the rule that fired on it.
pub fn full_report_with_rules(
    truth: &[Label],
    pred: &[Label],
    texts: &[String],
    ids: &[String],
    fired: Option<&[Option<String>]>,
) -> Result<EvalReport, EvalError> {
    let counts = confusion(truth, pred)?;
    let n = truth.len();
    let check = |what, found| {
        if found == n {
            Ok(())
        } else {
            Err(EvalError::LengthMismatch { what, expected: n, found })
        }
    };
    check("texts", texts.len())?;
    check("ids", ids.len())?;
    if let Some(f) = fired {
        check("fired rules", f.len())?;
    }

    let mut per_class = BTreeMap::new();
    let mut pooled = ConfusionCounts::default();
    for label in Label::BOTH {
        let view = counts.viewed_as(label);
        let m = metrics(&view);
        per_class.insert(
            label.name().to_string(),
            ClassMetrics { precision: m.precision, recall: m.recall, f1: m.f1, support: view.tp + view.fn_ },
        );
        pooled.tp += view.tp;
        pooled.fp += view.fp;
        pooled.fn_ += view.fn_;
    }
    let micro_p = ratio(pooled.tp, pooled.tp + pooled.fp);
    let micro_r = ratio(pooled.tp, pooled.tp + pooled.fn_);
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.values().map(f).sum::<f64>() / per_class.len() as f64;
    let macro_avg = Averaged {
        precision: mean(|c| c.precision),
        recall: mean(|c| c.recall),
        f1: mean(|c| c.f1),
    };

    let errors = (0..n)
        .filter(|&i| truth[i] != pred[i])
        .map(|i| ErrorEntry {
            id: ids[i].clone(),
            text: texts[i].clone(),
            truth: truth[i],
            predicted: pred[i],
            fired_rule: fired.and_then(|f| f[i].clone()),
        })
        .collect();

    Ok(EvalReport {
        per_class,
        accuracy: metrics(&counts).accuracy,
        micro: Averaged { precision: micro_p, recall: micro_r, f1: f1_of(micro_p, micro_r) },
        macro_avg,
        confusion: counts,
        errors,
    })
}

/// Predicted labels for each example's normalized text.
pub fn predict_corpus(model: &dyn TextClassifier, corpus: &Corpus) -> Result<Vec<Label>, crate::Error> {
    corpus
        .examples()
        .iter()
        .map(|e| Ok(model.predict_text(&normalize(&e.text))?))
        .collect()
}

pub fn evaluate(model: &dyn TextClassifier, test: &Corpus) -> Result<EvalReport, crate::Error> {
    let pred = predict_corpus(model, test)?;
    report_for(test, &pred, None)
}

pub(crate) fn report_for(
    test: &Corpus,
    pred: &[Label],
    fired: Option<&[Option<String>]>,
) -> Result<EvalReport, crate::Error> {
    let ids: Vec<String> = test.examples().iter().map(|e| e.id.clone()).collect();
    let texts: Vec<String> = test.examples().iter().map(|e| e.text.clone()).collect();
    Ok(full_report_with_rules(&test.labels(), pred, &texts, &ids, fired)?)
}

/// The metrics averaged across folds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub negative_precision: f64,
    pub negative_recall: f64,
    pub negative_f1: f64,
    pub positive_precision: f64,
    pub positive_recall: f64,
    pub positive_f1: f64,
}

impl Headline {
    fn fields(&self) -> [f64; 11] {
        [
            self.accuracy,
            self.micro_f1,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.negative_precision,
            self.negative_recall,
            self.negative_f1,
            self.positive_precision,
            self.positive_recall,
            self.positive_f1,
        ]
    }

    fn from_fields(f: [f64; 11]) -> Headline {
        Headline {
            accuracy: f[0],
            micro_f1: f[1],
            macro_precision: f[2],
            macro_recall: f[3],
            macro_f1: f[4],
            negative_precision: f[5],
            negative_recall: f[6],
            negative_f1: f[7],
            positive_precision: f[8],
            positive_recall: f[9],
            positive_f1: f[10],
        }
    }

    /// Mean and population standard deviation, field by field.
    pub fn summarize(items: &[Headline]) -> (Headline, Headline) {
        let n = items.len().max(1) as f64;
        let mut mean = [0.0; 11];
        for h in items {
            for (m, v) in mean.iter_mut().zip(h.fields()) {
                *m += v / n;
            }
        }
        let mut var = [0.0; 11];
        for h in items {
            for ((s, v), m) in var.iter_mut().zip(h.fields()).zip(mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        (Headline::from_fields(mean), Headline::from_fields(var.map(f64::sqrt)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub report: EvalReport,
    pub with_rules: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub folds: Vec<FoldResult>,
    pub mean: Headline,
    pub stddev: Headline,
    pub with_rules_mean: Option<Headline>,
    pub with_rules_stddev: Option<Headline>,
}

/// Per-fold hook applied to the training side only, e.g. minority balancing.
pub type Rebalance<'a> = &'a dyn Fn(&Corpus, usize) -> Result<Corpus, crate::Error>;

/// Trains on every fold but one and evaluates on the held-out fold, for each
/// fold in turn.
pub fn cross_validate(
    corpus: &Corpus,
    plan: &FoldPlan,
    cfg: &TrainConfig,
    min_df: usize,
    ruleset: Option<&RuleSet>,
    rebalance: Option<Rebalance<'_>>,
) -> Result<CvReport, crate::Error> {
    let mut folds = Vec::with_capacity(plan.k());
    for fold in 0..plan.k() {
        let (train_idx, test_idx) = plan.partition(corpus, fold)?;
        let mut train = corpus.subset(&train_idx)?;
        if let Some(f) = rebalance {
            train = f(&train, fold)?;
        }
        let test = corpus.subset(&test_idx)?;
        let model = TfidfLinear::fit(&train, min_df, cfg)?;
        let (report, with_rules) = match ruleset {
            Some(rs) => {
                let cmp = crate::rules::compare_with_without(rs, &model, &test)?;
                (cmp.without, Some(cmp.with))
            }
            None => (evaluate(&model, &test)?, None),
        };
        folds.push(FoldResult { fold, train_size: train.len(), test_size: test.len(), report, with_rules });
    }
    let heads: Vec<Headline> = folds.iter().map(|f| f.report.headline()).collect();
    let (mean, stddev) = Headline::summarize(&heads);
    let (with_rules_mean, with_rules_stddev) = if ruleset.is_some() {
        let heads: Vec<Headline> = folds.iter().filter_map(|f| f.with_rules.as_ref()).map(|r| r.headline()).collect();
        let (m, s) = Headline::summarize(&heads);
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    Ok(CvReport { k: plan.k(), folds, mean, stddev, with_rules_mean, with_rules_stddev })
}

/// `model,class,precision,recall,f1,support` rows, one per class per report.
pub fn report_csv(reports: &[(&str, &EvalReport)]) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "class", "precision", "recall", "f1", "support"])?;
    for (model, report) in reports {
        for label in Label::BOTH {
            let c = report.class(label);
            w.write_record([
                model.to_string(),
                label.name().to_string(),
                format!("{:.6}", c.precision),
                format!("{:.6}", c.recall),
                format!("{:.6}", c.f1),
                c.support.to_string(),
            ])?;
        }
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv output is utf-8"))
}

/// `id,text,true,pred,fired_rule` rows for the misclassified examples.
pub fn errors_csv(report: &EvalReport) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "text", "true", "pred", "fired_rule"])?;
    for e in &report.errors {
        w.write_record([
            e.id.as_str(),
            e.text.as_str(),
            &e.truth.as_u8().to_string(),
            &e.predicted.as_u8().to_string(),
            e.fired_rule.as_deref().unwrap_or(""),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_folds, LabeledExample};
    use proptest::prelude::*;

    const P: Label = Label::Positive;
    const N: Label = Label::Negative;

    fn labels(bits: &[u8]) -> Vec<Label> {
        bits.iter().map(|&b| Label::from_u8(b).unwrap()).collect()
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&labels(&[1, 1, 0]), &labels(&[1, 0, 0])).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 0, fn_: 1, tn: 1 });
        let c = confusion(&labels(&[0]), &labels(&[0])).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 1 });
        assert!(matches!(confusion(&[P], &[P, N]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(confusion(&[], &[]), Err(EvalError::Empty)));
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 5 });
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (1.0, 1.0, 1.0, 1.0));
        let m = metrics(&ConfusionCounts { tp: 3, fp: 1, fn_: 2, tn: 4 });
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.6);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        let m = metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 3, tn: 0 });
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn single_class_report() {
        let t = vec![P, P];
        let ids = vec!["a".to_string(), "b".to_string()];
        let r = full_report(&t, &t, &ids, &ids).unwrap();
        let pos = r.class(P);
        assert_eq!((pos.precision, pos.recall, pos.f1, pos.support), (1.0, 1.0, 1.0, 2));
        let neg = r.class(N);
        assert_eq!((neg.precision, neg.recall, neg.f1, neg.support), (0.0, 0.0, 0.0, 0));
        assert!(r.errors.is_empty());
    }

    #[test]
    fn error_listing_carries_fired_rule() {
        let t = vec![P, N];
        let p = vec![N, N];
        let ids = vec!["a".to_string(), "b".to_string()];
        let fired = vec![Some("rule-1".to_string()), None];
        let r = full_report_with_rules(&t, &p, &ids, &ids, Some(&fired)).unwrap();
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.errors[0].fired_rule.as_deref(), Some("rule-1"));
        let csv = errors_csv(&r).unwrap();
        assert_eq!(csv, "id,text,true,pred,fired_rule\na,a,1,0,rule-1\n");
        let table = report_csv(&[("linear", &r)]).unwrap();
        assert_eq!(table.lines().count(), 3);
        assert!(table.starts_with("model,class,precision,recall,f1,support\nlinear,negative,"));
    }

    #[test]
    fn cross_validation_covers_every_example_once() {
        let mut ex = Vec::new();
        for i in 0..30 {
            ex.push(LabeledExample::original(format!("p{i}"), format!("happy healthy baby {i}"), P));
        }
        for i in 0..10 {
            ex.push(LabeledExample::original(format!("n{i}"), format!("sad loss {i}"), N));
        }
        let c = Corpus::new(ex).unwrap();
        let plan = make_folds(&c, 5, true, 3).unwrap();
        let cv = cross_validate(&c, &plan, &TrainConfig { epochs: 200, ..TrainConfig::default() }, 1, None, None).unwrap();
        assert_eq!(cv.folds.len(), 5);
        assert_eq!(cv.folds.iter().map(|f| f.test_size).sum::<usize>(), 40);
        assert!(cv.stddev.negative_f1.is_finite());
        assert!(cv.mean.accuracy > 0.9);
    }

    fn arb_pair() -> impl Strategy<Value = (Vec<Label>, Vec<Label>)> {
        (1usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec(any::<bool>(), n),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
        .prop_map(|(a, b)| {
            let f = |v: Vec<bool>| v.into_iter().map(|x| if x { P } else { N }).collect();
            (f(a), f(b))
        })
    }

    proptest! {
        #[test]
        fn micro_identity((t, p) in arb_pair()) {
            let ids: Vec<String> = (0..t.len()).map(|i| i.to_string()).collect();
            let r = full_report(&t, &p, &ids, &ids).unwrap();
            prop_assert!((r.micro.precision - r.accuracy).abs() < 1e-12);
            prop_assert!((r.micro.recall - r.accuracy).abs() < 1e-12);
            prop_assert!((r.micro.f1 - r.accuracy).abs() < 1e-12);
            let c = r.confusion;
            prop_assert_eq!(r.errors.len(), t.len() - (c.tp + c.tn));
            prop_assert_eq!(r.class(P).support + r.class(N).support, t.len());
        }

        #[test]
        fn perfect_prediction_has_accuracy_one((t, _) in arb_pair()) {
            prop_assert_eq!(metrics(&confusion(&t, &t).unwrap()).accuracy, 1.0);
        }

        #[test]
        fn permutation_invariance((t, p) in arb_pair(), rot in 0usize..60) {
            let k = rot % t.len();
            let mut t2 = t.clone();
            let mut p2 = p.clone();
            t2.rotate_left(k);
            p2.rotate_left(k);
            prop_assert_eq!(confusion(&t, &p).unwrap(), confusion(&t2, &p2).unwrap());
        }

        #[test]
        fn f1_between_precision_and_recall(tp in 1usize..50, fp in 0usize..50, fn_ in 0usize..50, tn in 0usize..50) {
            let m = metrics(&ConfusionCounts { tp, fp, fn_, tn });
            prop_assert!(m.f1 >= m.precision.min(m.recall) - 1e-12);
            prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
        }
    }
}
