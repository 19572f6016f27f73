//! Turns run records and evaluation results into the density, regime, and
//! tokens-per-parameter analyses, with plot-ready CSV exports.

mod curves;
mod records;

pub use curves::{
    detect_inverse_scaling, optimal_density, tpp_curve, CurvePoint, CurveSet, DensityCurve,
    Regime, RegimeSplit, Series,
};
pub use records::RunRecord;

mod loader;
pub use loader::{export_curves, import_curves_csv, load_runs, LoadOutcome};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {need} points, got {got}")]
    InsufficientData { need: usize, got: usize },
    #[error("{file}:{line}: malformed record: {msg}")]
    MalformedLine {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("{file}:{line}: budget mismatch: {msg}")]
    BudgetMismatch {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, AnalysisError>;
