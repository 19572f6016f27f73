//! Evaluation protocol: few-shot prompt assembly, answer-token task loss,
//! multiple-choice and open-ended accuracy, answer extraction, and
//! self-consistency voting over sampled continuations.

mod evaluate;
mod extract;
mod prompt;
mod sampling;
mod scoring;
mod types;

pub use evaluate::{evaluate, EvalMode};
pub use extract::{canonicalize, default_patterns, extract_answer};
pub use prompt::build_fewshot_prompt;
pub use sampling::{sample_decode, self_consistency, self_consistency_votes, SampleParams};
pub use scoring::{answer_token_loss, mc_accuracy, ChoiceScore, LanguageModel};
pub use types::{load_task_file, EvalItem, EvalResult, ItemRecord, SCConfig, TaskKind, TaskSpec};

use thiserror::Error;

use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sequence of {needed} tokens exceeds model maximum {max}")]
    Truncation { needed: usize, max: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{file}:{line}: malformed eval item: {msg}")]
    MalformedItem {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;
