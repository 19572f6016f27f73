use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// One metrics emission from a training run; JSON-lines on disk, one
/// record per (run_id, step).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub step: u64,
    pub tokens_seen: u64,
    pub d: usize,
    #[serde(rename = "L")]
    pub n_layers: usize,
    #[serde(rename = "E")]
    pub n_experts: usize,
    #[serde(rename = "k")]
    pub top_k: usize,
    #[serde(rename = "g")]
    pub granularity: usize,
    pub total_params: u64,
    pub active_params: u64,
    pub sparsity: f64,
    pub lr: f64,
    pub train_ce: f64,
    pub val_ce: f64,
    pub lb_loss: f64,
    pub rz_loss: f64,
    /// Extra provenance so budget fields can be recounted exactly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    /// Per-layer routed-token fractions for this batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_load: Option<Vec<Vec<f64>>>,
    /// Per-task (task loss, accuracy), attached by the eval stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<BTreeMap<String, (f64, f64)>>,
}

impl RunRecord {
    /// Effective expert count E·g.
    pub fn effective_experts(&self) -> usize {
        self.n_experts * self.granularity
    }

    pub fn density(&self) -> f64 {
        self.top_k as f64 / self.effective_experts() as f64
    }
}
