//! Desk-scale Mixture-of-Experts scaling laboratory.
//!
//! Trains small MoE transformers on seeded synthetic corpora, plans
//! iso-FLOP sweeps, evaluates answer-token task loss and self-consistency
//! decoding, probes curvature via Kronecker-factored Fisher eigenvalues,
//! and turns run records into density/TPP analysis curves.

pub mod numerics;
pub mod model;
pub mod budget;
pub mod trainer;
pub mod evalsuite;
pub mod analysis;
pub mod curvature;
pub mod cli;

pub use numerics::{Precision, Tensor};

pub use cli::run_cli;
