use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::numerics::{Precision, Tensor};

use super::{Result, TrainError};

/// AdamW hyperparameters. β₂ = 0.95 for pretraining; ε is a first-class
/// sweep knob.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First/second moment buffers mirroring the parameter store order.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub hyper: AdamHyper,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl OptimState {
    pub fn new(params: &ParamStore, hyper: AdamHyper) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        OptimState {
            hyper,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// One decoupled-weight-decay Adam step. `grads[i]` aligns with the i-th
/// store entry; `None` means zero gradient. Decay is applied
/// multiplicatively before the moment update. All results are rounded to
/// `mode` so resumed runs replay bit-exactly.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut OptimState,
    lr: f64,
    mode: Precision,
) -> Result<()> {
    if grads.len() != state.first_moment.len() {
        return Err(TrainError::InvalidSetup(format!(
            "{} gradients for {} parameters",
            grads.len(),
            state.first_moment.len()
        )));
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);

    for (i, (name, param)) in params.iter_mut().enumerate() {
        if let Some(g) = &grads[i] {
            if g.shape() != param.shape() {
                return Err(TrainError::ShapeMismatch {
                    name: name.to_string(),
                    stored: g.shape().to_vec(),
                    expected: param.shape().to_vec(),
                });
            }
        }
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let p = param.data_mut();
        let zero = vec![];
        let g: &[f64] = grads[i].as_ref().map_or(&zero, |g| g.data());
        for j in 0..p.len() {
            let gj = if g.is_empty() { 0.0 } else { g[j] };
            let decayed = mode.round(p[j] * (1.0 - lr * h.weight_decay));
            m[j] = mode.round(h.beta1 * m[j] + (1.0 - h.beta1) * gj);
            v[j] = mode.round(h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj);
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] = mode.round(decayed - lr * m_hat / (v_hat.sqrt() + h.eps));
        }
    }
    Ok(())
}
