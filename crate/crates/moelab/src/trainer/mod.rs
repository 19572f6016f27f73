//! Pre-training loop: AdamW with warmup+cosine schedule, seeded synthetic
//! corpora with a 99:1 train/validation split, checkpointing, and
//! JSON-lines metric emission.

mod checkpoint;
mod corpus;
mod optim;
mod schedule;
pub mod tokenizer;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use corpus::{make_corpus, verify_chain_answer, Corpus, CorpusSpec, GeneratorKind};
pub use optim::{adamw_step, AdamHyper, OptimState};
pub use schedule::{lr_at, Schedule};
pub use train::{resume_run, train_run, validation_ce, TrainOutcome, TrainParams};

use thiserror::Error;

use crate::model::ModelError;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite loss at step {step}; aborting run")]
    NonFiniteLoss { step: u64 },
    #[error("checkpoint header is corrupt: {0}")]
    CorruptHeader(String),
    #[error("checkpoint payload truncated: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: u64, got: u64 },
    #[error("checkpoint version {got} unsupported (expected {expected})")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("checkpoint tensor {name}: shape {stored:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid training setup: {0}")]
    InvalidSetup(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;
