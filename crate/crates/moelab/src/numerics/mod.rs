//! Dense tensor numerics with reverse-mode automatic differentiation.
//!
//! Everything the transformer needs and nothing more: matmul, elementwise
//! ops, softmax, RMS normalization, masked cross-entropy, rotary rotation,
//! and gather/scatter for token routing. Gradients are recorded on a
//! [`Tape`] and replayed in reverse. A finite-difference oracle lives in
//! [`finite_diff`] for checking every backward rule independently.

mod tensor;
mod tape;
pub mod finite_diff;

pub use tensor::{Precision, Tensor};
pub use tape::{Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape/element count mismatch: shape {shape:?} implies {expected} elements, got {got}")]
    BadShape {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("cross-entropy mask has no true entries")]
    EmptyMask,
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward already ran on this tape; build a fresh tape per pass")]
    DoubleBackward,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("index {index} out of bounds for dimension of size {size}")]
    IndexOutOfBounds { index: usize, size: usize },
}

pub type Result<T> = std::result::Result<T, NumericsError>;
