//! Exact parameter and FLOP accounting, sparsity/density/TPP metrics, and
//! the iso-FLOP sweep planner.
//!
//! FLOPs per token are 2 × active non-embedding parameters (forward); the
//! attention O(T²) term is omitted, which perturbs iso-FLOP grouping
//! identically across sparsity levels at fixed (d, L, T).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;

#[derive(Debug, Error)]
pub enum BudgetError {
    #[error("tokens-per-parameter with zero parameters")]
    ZeroParams,
}

/// Parameter counts and compute metrics for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub total_params: u64,
    /// Parameters touched per token: shared weights plus k' experts per layer.
    pub active_params: u64,
    pub flops_per_token_forward: u64,
    /// 1 − k'/E_eff.
    pub sparsity: f64,
    /// k'/E_eff.
    pub density: f64,
    pub tpp_total: f64,
    pub tpp_active: f64,
}

/// One planned run: a configuration and its token budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanEntry {
    pub config: ModelConfig,
    pub tokens: u64,
    pub flops_per_token: u64,
}

/// Iso-FLOP sweep: configurations whose per-token compute matches the
/// target, each paired with the token budget that exhausts the total
/// FLOP budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPlan {
    pub target_flops_per_token: f64,
    pub total_flop_budget: f64,
    pub tolerance: f64,
    pub entries: Vec<PlanEntry>,
}

/// Exact (total, active) parameter counts by weight-tensor enumeration:
/// embedding, untied LM head, per-layer attention (4d²), router
/// (d·E_eff), experts (3·d·hidden each), and norm gains.
pub fn count_params(config: &ModelConfig) -> (u64, u64) {
    let d = config.d_model as u64;
    let v = config.vocab_size as u64;
    let l = config.n_layers as u64;
    let e = config.effective_experts() as u64;
    let k = config.effective_top_k() as u64;
    let h = config.expert_hidden() as u64;

    let embed = v * d;
    let head = d * v;
    let per_layer_shared = 4 * d * d + d * e + 2 * d;
    let per_expert = 3 * d * h;
    let final_norm = d;

    let total = embed + head + final_norm + l * (per_layer_shared + e * per_expert);
    let active = embed + head + final_norm + l * (per_layer_shared + k * per_expert);
    (total, active)
}

/// Forward FLOPs per token: 2 × active parameters excluding the input
/// embedding table, including the LM head.
pub fn flops_per_token(config: &ModelConfig) -> u64 {
    let (_, active) = count_params(config);
    let embed = (config.vocab_size * config.d_model) as u64;
    2 * (active - embed)
}

/// Fraction of inactive experts: 1 − k'/E_eff.
pub fn sparsity_of(config: &ModelConfig) -> f64 {
    1.0 - density_of(config)
}

pub fn density_of(config: &ModelConfig) -> f64 {
    config.effective_top_k() as f64 / config.effective_experts() as f64
}

/// Tokens per parameter.
pub fn tpp(tokens: f64, params: f64) -> Result<f64, BudgetError> {
    if params <= 0.0 {
        return Err(BudgetError::ZeroParams);
    }
    Ok(tokens / params)
}

/// Full budget report for a configuration at a given token budget.
pub fn budget_report(config: &ModelConfig, tokens: u64) -> BudgetReport {
    let (total, active) = count_params(config);
    BudgetReport {
        total_params: total,
        active_params: active,
        flops_per_token_forward: flops_per_token(config),
        sparsity: sparsity_of(config),
        density: density_of(config),
        tpp_total: tokens as f64 / total as f64,
        tpp_active: tokens as f64 / active as f64,
    }
}

/// Filter `grid` to configurations whose FLOPs/token lies within
/// ±`tolerance` (relative) of the target, assigning each the token count
/// that spends `total_flop_budget`. Output is ordered by ascending
/// sparsity, then (d, L, E, k, g) for determinism.
pub fn plan_isoflop(
    target_flops_per_token: f64,
    grid: &[ModelConfig],
    tolerance: f64,
    total_flop_budget: f64,
) -> SweepPlan {
    assert!(tolerance >= 0.0, "tolerance must be nonnegative");
    let mut entries: Vec<PlanEntry> = grid
        .iter()
        .filter(|c| c.validate().is_ok())
        .filter_map(|c| {
            let fpt = flops_per_token(c);
            let rel = (fpt as f64 - target_flops_per_token).abs() / target_flops_per_token;
            if rel <= tolerance {
                Some(PlanEntry {
                    config: c.clone(),
                    tokens: (total_flop_budget / fpt as f64).round() as u64,
                    flops_per_token: fpt,
                })
            } else {
                None
            }
        })
        .collect();
    entries.sort_by(|a, b| {
        sparsity_of(&a.config)
            .partial_cmp(&sparsity_of(&b.config))
            .unwrap()
            .then_with(|| {
                let ka = key(&a.config);
                ka.cmp(&key(&b.config))
            })
    });
    SweepPlan {
        target_flops_per_token,
        total_flop_budget,
        tolerance,
        entries,
    }
}

fn key(c: &ModelConfig) -> (usize, usize, usize, usize, usize) {
    (c.d_model, c.n_layers, c.n_experts, c.top_k, c.granularity)
}
