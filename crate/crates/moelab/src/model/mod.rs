//! Mixtral-style decoder with MoE feed-forward blocks: rotary-embedding
//! attention, RMSNorm, SwiGLU experts, dropless token-choice top-k routing,
//! and the combined CE + load-balance + router-z training loss.

mod config;
mod params;
mod router;
mod transformer;

pub use config::ModelConfig;
pub use params::ParamStore;
pub use router::{route, MoELayerStats, RouterDecision};
pub use transformer::{combined_loss, 
    lb_loss, rz_loss, ForwardOut, LinearProbe, LossBreakdown, MoeModel, DEFAULT_ALPHA,
    DEFAULT_BETA,
};

use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ModelError>;
