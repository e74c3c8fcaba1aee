//! Ordered regex rules that override classifier predictions.
//!
//! Patterns use a backtracking dialect with lookaround and are matched
//! case-insensitively against the whole normalized text. The first matching
//! rule decides the final label.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use fancy_regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::TextClassifier;
use crate::corpus::{Corpus, Label};
use crate::eval::{report_for, EvalReport};
use crate::textproc::normalize;

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("rules file {path}: {message}")]
    Io { path: String, message: String },
    #[error("rules file is not a valid rule list: {0}")]
    Parse(String),
    #[error("rule {rule_id}: pattern does not compile: {message}")]
    PatternCompileError { rule_id: String, message: String },
    #[error("duplicate rule id {0}")]
    DuplicateRuleId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleAction {
    ForceNegative,
    ForcePositive,
}

impl RuleAction {
    pub fn label(self) -> Label {
        match self {
            RuleAction::ForceNegative => Label::Negative,
            RuleAction::ForcePositive => Label::Positive,
        }
    }
}

/// One entry of a rules file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub rule_id: String,
    pub pattern: String,
    pub action: RuleAction,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone)]
pub struct Rule {
    spec: RuleSpec,
    regex: Regex,
}

impl Rule {
    pub fn compile(spec: RuleSpec) -> Result<Rule, RuleError> {
        let regex = RegexBuilder::new(&format!("(?i){}", spec.pattern))
            .backtrack_limit(10_000_000)
            .build()
            .map_err(|e| RuleError::PatternCompileError {
                rule_id: spec.rule_id.clone(),
                message: e.to_string(),
            })?;
        Ok(Rule { spec, regex })
    }

    pub fn id(&self) -> &str {
        &self.spec.rule_id
    }

    pub fn action(&self) -> RuleAction {
        self.spec.action
    }

    pub fn spec(&self) -> &RuleSpec {
        &self.spec
    }

    /// A match attempt that exhausts the backtrack limit counts as no match.
    pub fn matches(&self, text: &str) -> bool {
        self.regex.is_match(text).unwrap_or(false)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

impl RuleSet {
    pub fn empty() -> RuleSet {
        RuleSet::default()
    }

    pub fn new(specs: Vec<RuleSpec>) -> Result<RuleSet, RuleError> {
        let mut seen = BTreeSet::new();
        let mut rules = Vec::with_capacity(specs.len());
        for spec in specs {
            if !seen.insert(spec.rule_id.clone()) {
                return Err(RuleError::DuplicateRuleId(spec.rule_id));
            }
            rules.push(Rule::compile(spec)?);
        }
        Ok(RuleSet { rules })
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn specs(&self) -> Vec<RuleSpec> {
        self.rules.iter().map(|r| r.spec.clone()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.specs()).expect("rules serialize")
    }

    /// Final label and the id of the rule that decided it, if any.
    pub fn apply(&self, text: &str, base: Label) -> (Label, Option<&str>) {
        match self.rules.iter().find(|r| r.matches(text)) {
            Some(r) => (r.action().label(), Some(r.id())),
            None => (base, None),
        }
    }

    /// Ids of every rule matching `text`, in order.
    pub fn matching(&self, text: &str) -> Vec<&str> {
        self.rules.iter().filter(|r| r.matches(text)).map(|r| r.id()).collect()
    }
}

pub fn parse_rules(json: &str) -> Result<RuleSet, RuleError> {
    let specs: Vec<RuleSpec> = serde_json::from_str(json).map_err(|e| RuleError::Parse(e.to_string()))?;
    RuleSet::new(specs)
}

pub fn load_rules(path: &Path) -> Result<RuleSet, RuleError> {
    let json = fs::read_to_string(path).map_err(|e| RuleError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_rules(&json)
}

pub fn apply_rules<'a>(ruleset: &'a RuleSet, text: &str, base: Label) -> (Label, Option<&'a str>) {
    ruleset.apply(text, base)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleStats {
    pub rule_id: String,
    pub fires: usize,
    pub flips: usize,
    pub flips_correct: usize,
    pub flips_incorrect: usize,
}

/// A text matched by rules with different actions, so rule order matters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleConflict {
    pub id: String,
    pub rule_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleComparison {
    pub without: EvalReport,
    pub with: EvalReport,
    pub per_rule: Vec<RuleStats>,
    pub conflicts: Vec<RuleConflict>,
}

/// Evaluates the classifier alone and with rules applied to the same base
/// predictions.
pub fn compare_with_without(
    ruleset: &RuleSet,
    model: &dyn TextClassifier,
    test: &Corpus,
) -> Result<RuleComparison, crate::Error> {
    let mut per_rule: Vec<RuleStats> = ruleset
        .rules()
        .iter()
        .map(|r| RuleStats { rule_id: r.id().to_string(), ..RuleStats::default() })
        .collect();
    let mut base = Vec::with_capacity(test.len());
    let mut final_labels = Vec::with_capacity(test.len());
    let mut fired = Vec::with_capacity(test.len());
    let mut conflicts = Vec::new();
    for ex in test.examples() {
        let text = normalize(&ex.text);
        let b = model.predict_text(&text)?;
        let (f, rule) = ruleset.apply(&text, b);
        if let Some(id) = rule {
            let stats = per_rule.iter_mut().find(|s| s.rule_id == id).expect("rule has stats");
            stats.fires += 1;
            if f != b {
                stats.flips += 1;
                if f == ex.label {
                    stats.flips_correct += 1;
                } else {
                    stats.flips_incorrect += 1;
                }
            }
        }
        let hits = ruleset.matching(&text);
        let actions: BTreeSet<Label> = hits
            .iter()
            .map(|id| ruleset.rules().iter().find(|r| r.id() == *id).expect("known id").action().label())
            .collect();
        if actions.len() > 1 {
            conflicts.push(RuleConflict { id: ex.id.clone(), rule_ids: hits.iter().map(|s| s.to_string()).collect() });
        }
        base.push(b);
        final_labels.push(f);
        fired.push(rule.map(str::to_string));
    }
    Ok(RuleComparison {
        without: report_for(test, &base, None)?,
        with: report_for(test, &final_labels, Some(&fired))?,
        per_rule,
        conflicts,
    })
}

/// `rule_id,fires,flips,flips_correct,flips_incorrect`.
pub fn rule_stats_csv(stats: &[RuleStats]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in stats {
        w.serialize(s)?;
    }
    if stats.is_empty() {
        w.write_record(["rule_id", "fires", "flips", "flips_correct", "flips_incorrect"])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv output is utf-8"))
}
