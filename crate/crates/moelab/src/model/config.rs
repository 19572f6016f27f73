use serde::{Deserialize, Serialize};

use crate::numerics::Precision;

use super::{ModelError, Result};

fn default_ffn_expansion() -> usize {
    2
}
fn default_granularity() -> usize {
    1
}
fn default_rope_base() -> f64 {
    10000.0
}
fn default_head_init_std() -> f64 {
    0.02
}
fn default_max_seq_len() -> usize {
    1024
}

/// Full architectural and sparsity description of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Model width d.
    pub d_model: usize,
    /// Number of decoder layers L.
    pub n_layers: usize,
    pub n_heads: usize,
    /// Experts per layer E (before fine-grained segmentation).
    pub n_experts: usize,
    /// Experts activated per token k.
    pub top_k: usize,
    /// Fine-grained segmentation factor g: E·g thinner experts at fixed
    /// total parameters.
    #[serde(default = "default_granularity")]
    pub granularity: usize,
    /// Override for the activated expert count when g > 1; `None` leaves
    /// top_k unscaled.
    #[serde(default)]
    pub effective_top_k: Option<usize>,
    /// FFN hidden width as a multiple of d (2 throughout).
    #[serde(default = "default_ffn_expansion")]
    pub ffn_expansion: usize,
    pub vocab_size: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// LM-head initialization std; a sweep knob.
    #[serde(default = "default_head_init_std")]
    pub head_init_std: f64,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    /// E·g, the routable expert count.
    pub fn effective_experts(&self) -> usize {
        self.n_experts * self.granularity
    }

    /// k', the activated expert count.
    pub fn effective_top_k(&self) -> usize {
        self.effective_top_k.unwrap_or(self.top_k)
    }

    /// Hidden width of one (fine-grained) expert.
    pub fn expert_hidden(&self) -> usize {
        self.ffn_expansion * self.d_model / self.granularity
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.n_experts == 0
            || self.granularity == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
        {
            return fail("all dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head_dim {} must be even for rotary embedding", self.head_dim()));
        }
        let k = self.effective_top_k();
        if k < 1 || k > self.effective_experts() {
            return fail(format!(
                "effective_top_k {} outside [1, {}] (= E*g)",
                k,
                self.effective_experts()
            ));
        }
        if (self.ffn_expansion * self.d_model) % self.granularity != 0 {
            return fail(format!(
                "expert hidden width {}*{}/{} is not an integer",
                self.ffn_expansion, self.d_model, self.granularity
            ));
        }
        Ok(())
    }
}
