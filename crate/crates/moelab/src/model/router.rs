use crate::numerics::Tensor;

use super::{ModelError, Result};

/// Per-token routing outcome: raw logits, the selected expert index set,
/// and gates renormalized over the selection.
#[derive(Debug, Clone)]
pub struct RouterDecision {
    /// Raw router logits, [T, E_eff].
    pub logits: Tensor,
    /// Selected expert indices per token, ascending, exactly k' each.
    pub selected: Vec<Vec<usize>>,
    /// Gate values aligned with `selected`; zero implied elsewhere.
    pub gates: Vec<Vec<f64>>,
}

impl RouterDecision {
    pub fn n_tokens(&self) -> usize {
        self.selected.len()
    }

    /// Dense [T, E_eff] gate matrix (zeros off the selection).
    pub fn dense_gates(&self) -> Tensor {
        let t = self.n_tokens();
        let e = self.logits.ncols();
        let mut out = vec![0.0; t * e];
        for (row, (sel, g)) in self.selected.iter().zip(&self.gates).enumerate() {
            for (&i, &gv) in sel.iter().zip(g) {
                out[row * e + i] = gv;
            }
        }
        Tensor::new(vec![t, e], out).expect("gate shape")
    }
}

/// Per-layer routing statistics consumed by the load-balance loss.
#[derive(Debug, Clone)]
pub struct MoELayerStats {
    /// Routed-token fraction per expert; sums to k'.
    pub token_fraction: Vec<f64>,
    /// Mean router probability per expert from the full softmax; sums to 1.
    pub mean_probability: Vec<f64>,
    /// k' used for this layer.
    pub top_k: usize,
}

/// Top-k' indices of one logit row, ties broken toward the lower index.
/// Returned ascending.
pub(crate) fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .expect("non-finite router logit")
            .then(a.cmp(&b))
    });
    let mut sel = order[..k].to_vec();
    sel.sort_unstable();
    sel
}

/// Softmax restricted to the selected logits.
pub(crate) fn restricted_softmax(row: &[f64], selected: &[usize]) -> Vec<f64> {
    let max = selected
        .iter()
        .map(|&i| row[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = selected.iter().map(|&i| (row[i] - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Dropless token-choice top-k routing over raw logits [T, E_eff].
pub fn route(logits: &Tensor, top_k: usize) -> Result<RouterDecision> {
    let e = logits.ncols();
    if top_k < 1 || top_k > e {
        return Err(ModelError::InvalidConfig(format!(
            "top_k {top_k} outside [1, {e}]"
        )));
    }
    let t = logits.nrows();
    let mut selected = Vec::with_capacity(t);
    let mut gates = Vec::with_capacity(t);
    for r in 0..t {
        let row = logits.row(r);
        let sel = top_k_indices(row, top_k);
        let g = restricted_softmax(row, &sel);
        selected.push(sel);
        gates.push(g);
    }
    Ok(RouterDecision {
        logits: logits.clone(),
        selected,
        gates,
    })
}

/// Routing statistics for one layer's decision.
pub fn layer_stats(decision: &RouterDecision) -> MoELayerStats {
    let t = decision.n_tokens();
    let e = decision.logits.ncols();
    let k = decision.selected.first().map_or(0, Vec::len);
    let mut token_fraction = vec![0.0; e];
    for sel in &decision.selected {
        for &i in sel {
            token_fraction[i] += 1.0 / t as f64;
        }
    }
    let mut mean_probability = vec![0.0; e];
    for r in 0..t {
        let probs = restricted_softmax(decision.logits.row(r), &(0..e).collect::<Vec<_>>());
        for (p, m) in probs.iter().zip(mean_probability.iter_mut()) {
            *m += p / t as f64;
        }
    }
    MoELayerStats {
        token_fraction,
        mean_probability,
        top_k: k,
    }
}
