//! Imbalanced short-text classification: augmentation with TF-IDF fidelity
//! scoring, LLM paraphrasing, minority rebalancing, a linear classifier,
//! regex rule overrides and evaluation.

pub mod augment;
pub mod balancer;
pub mod classifier;
pub mod corpus;
pub mod eval;
pub mod fixtures;
pub mod llm_augment;
pub mod rules;
pub mod seed;
pub mod textproc;

use thiserror::Error;

/// Error type for operations that span several modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Text(#[from] textproc::TextError),
    #[error(transparent)]
    Augment(#[from] augment::AugmentError),
    #[error(transparent)]
    Llm(#[from] llm_augment::LlmError),
    #[error(transparent)]
    Balance(#[from] balancer::BalanceError),
    #[error(transparent)]
    Classifier(#[from] classifier::ClassifierError),
    #[error(transparent)]
    Rules(#[from] rules::RuleError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
