use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Precision, Tape, Tensor, Var};

use super::config::ModelConfig;
use super::params::ParamStore;
use super::router::{self, layer_stats, MoELayerStats, RouterDecision};
use super::{ModelError, Result};

/// Load-balance coefficient α from the training setup.
pub const DEFAULT_ALPHA: f64 = 1e-2;
/// Router-z coefficient β from the training setup.
pub const DEFAULT_BETA: f64 = 1e-3;

const MASK_NEG: f64 = -1e9;
const NORM_EPS: f64 = 1e-6;

/// One recorded linear layer: its input activations and pre-activation
/// output on the tape. Consumed by the curvature probe.
pub struct LinearProbe<'t> {
    pub name: String,
    pub input: Var<'t>,
    pub output: Var<'t>,
}

/// Everything one forward pass produces.
pub struct ForwardOut<'t> {
    /// [T, vocab] next-token logits.
    pub logits: Var<'t>,
    /// Load-balance loss, averaged over layers (scalar var).
    pub lb: Var<'t>,
    /// Router-z loss, averaged over layers and tokens (scalar var).
    pub rz: Var<'t>,
    /// Per-layer routing statistics.
    pub stats: Vec<MoELayerStats>,
    /// Per-layer raw router logits.
    pub router_logits: Vec<Tensor>,
    /// Per-layer routing decisions.
    pub decisions: Vec<RouterDecision>,
    pub probes: Vec<LinearProbe<'t>>,
    /// Leaf vars per parameter, in store order; gradient readback goes
    /// through these.
    pub param_vars: Vec<(String, Var<'t>)>,
}

impl<'t> ForwardOut<'t> {
    pub fn param_var(&self, name: &str) -> Option<Var<'t>> {
        self.param_vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

/// The combined training loss and its components.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_lb: f64,
    pub l_rz: f64,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Re-derive `total` from the components with the same op order and
    /// rounding the tape used.
    pub fn recompute_total(&self, mode: Precision) -> f64 {
        let lb_term = mode.round(self.l_lb * self.alpha);
        let rz_term = mode.round(self.l_rz * self.beta);
        mode.round(mode.round(self.l_ce + lb_term) + rz_term)
    }
}

/// Load-balance loss from routing statistics: (E_eff/k') · Σᵢ fᵢ·Pᵢ per
/// layer, averaged over layers. Equals 1 at exactly uniform routing and
/// E_eff under total collapse with k' = 1.
pub fn lb_loss(stats: &[MoELayerStats]) -> f64 {
    assert!(!stats.is_empty());
    let mut total = 0.0;
    for s in stats {
        let e = s.token_fraction.len() as f64;
        let dot: f64 = s
            .token_fraction
            .iter()
            .zip(&s.mean_probability)
            .map(|(f, p)| f * p)
            .sum();
        total += e / s.top_k as f64 * dot;
    }
    total / stats.len() as f64
}

/// Router-z loss: mean over all tokens of squared logsumexp of the raw
/// router logits, averaged over layers.
pub fn rz_loss(router_logits: &[Tensor]) -> f64 {
    assert!(!router_logits.is_empty());
    let mut total = 0.0;
    for logits in router_logits {
        let (t, e) = (logits.nrows(), logits.ncols());
        let mut layer = 0.0;
        for r in 0..t {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row[..e].iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            layer += lse * lse;
        }
        total += layer / t as f64;
    }
    total / router_logits.len() as f64
}

pub struct MoeModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl MoeModel {
    /// Initialize parameters: truncated normal std 0.02, output
    /// projections scaled by 1/sqrt(2L), unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let h = config.expert_hidden();
        let e = config.effective_experts();
        let v = config.vocab_size;
        let std = 0.02;
        let out_std = std / (2.0 * config.n_layers as f64).sqrt();

        let mut params = ParamStore::new();
        let mat = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64| {
            Tensor::from_fn(vec![rows, cols], |_| trunc_normal(rng, std))
        };
        params.insert("embed.weight", mat(&mut rng, v, d, std));
        for l in 0..config.n_layers {
            params.insert(format!("layer{l}.attn_norm.gain"), ones(d));
            params.insert(format!("layer{l}.attn.wq"), mat(&mut rng, d, d, std));
            params.insert(format!("layer{l}.attn.wk"), mat(&mut rng, d, d, std));
            params.insert(format!("layer{l}.attn.wv"), mat(&mut rng, d, d, std));
            params.insert(format!("layer{l}.attn.wo"), mat(&mut rng, d, d, out_std));
            params.insert(format!("layer{l}.ffn_norm.gain"), ones(d));
            params.insert(format!("layer{l}.router.weight"), mat(&mut rng, d, e, std));
            for x in 0..e {
                params.insert(format!("layer{l}.expert{x}.w_gate"), mat(&mut rng, d, h, std));
                params.insert(format!("layer{l}.expert{x}.w_up"), mat(&mut rng, d, h, std));
                params.insert(
                    format!("layer{l}.expert{x}.w_down"),
                    mat(&mut rng, h, d, out_std),
                );
            }
        }
        params.insert("final_norm.gain", ones(d));
        params.insert("lm_head.weight", mat(&mut rng, d, v, config.head_init_std));

        // Round stored parameters to the configured precision up front so
        // forward passes see exactly what a checkpoint would.
        if config.precision == Precision::F32 {
            let mut params = params;
            for (_, t) in params.iter_mut() {
                Precision::F32.round_slice(t.data_mut());
            }
            return Ok(MoeModel { config, params });
        }
        Ok(MoeModel { config, params })
    }

    /// Causal decoder forward pass over one token sequence.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        tokens: &[u32],
        requires_grad: bool,
    ) -> Result<ForwardOut<'t>> {
        let cfg = &self.config;
        let t = tokens.len();
        if t == 0 {
            return Err(ModelError::InvalidConfig("empty token sequence".into()));
        }
        if t > cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: t,
                max: cfg.max_seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id: bad,
                vocab: cfg.vocab_size,
            });
        }

        let mut param_vars = Vec::with_capacity(self.params.len());
        for (name, tensor) in self.params.iter() {
            param_vars.push((name.to_string(), tape.leaf(tensor.clone(), requires_grad)));
        }
        let var_of = |name: &str| -> Var<'t> {
            param_vars
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .unwrap_or_else(|| panic!("missing parameter {name}"))
        };

        let token_rows: Vec<usize> = tokens.iter().map(|&id| id as usize).collect();
        let mut x = var_of("embed.weight").gather_rows(&token_rows)?;

        let mask = tape.constant(causal_mask(t));
        let mut probes = Vec::new();
        let mut stats = Vec::new();
        let mut router_logits = Vec::new();
        let mut decisions = Vec::new();
        let mut lb_sum: Option<Var<'t>> = None;
        let mut rz_sum: Option<Var<'t>> = None;

        for l in 0..cfg.n_layers {
            // Attention block, pre-norm.
            let hn = x.rmsnorm(var_of(&format!("layer{l}.attn_norm.gain")), NORM_EPS)?;
            let wq = var_of(&format!("layer{l}.attn.wq"));
            let wk = var_of(&format!("layer{l}.attn.wk"));
            let wv = var_of(&format!("layer{l}.attn.wv"));
            let wo = var_of(&format!("layer{l}.attn.wo"));
            let q = hn.matmul(wq)?;
            let k = hn.matmul(wk)?;
            let v = hn.matmul(wv)?;
            probes.push(LinearProbe {
                name: format!("layer{l}.attn.wq"),
                input: hn,
                output: q,
            });
            probes.push(LinearProbe {
                name: format!("layer{l}.attn.wk"),
                input: hn,
                output: k,
            });
            probes.push(LinearProbe {
                name: format!("layer{l}.attn.wv"),
                input: hn,
                output: v,
            });
            let hd = cfg.head_dim();
            let q = q.rope(hd, cfg.rope_base)?;
            let k = k.rope(hd, cfg.rope_base)?;
            let scale = 1.0 / (hd as f64).sqrt();
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = q.slice_cols(head * hd, hd)?;
                let kh = k.slice_cols(head * hd, hd)?;
                let vh = v.slice_cols(head * hd, hd)?;
                let scores = qh.matmul_nt(kh)?.scale(scale).add(mask)?;
                let probs = scores.softmax_rows()?;
                heads.push(probs.matmul(vh)?);
            }
            let merged = tape.concat_cols(&heads)?;
            let attn_out = merged.matmul(wo)?;
            probes.push(LinearProbe {
                name: format!("layer{l}.attn.wo"),
                input: merged,
                output: attn_out,
            });
            x = x.add(attn_out)?;

            // MoE feed-forward block, pre-norm.
            let fn_in = x.rmsnorm(var_of(&format!("layer{l}.ffn_norm.gain")), NORM_EPS)?;
            let (y, decision, lb_l, rz_l) =
                self.moe_layer(tape, l, fn_in, &mut probes, &var_of)?;
            x = x.add(y)?;

            stats.push(layer_stats(&decision));
            router_logits.push(decision.logits.clone());
            decisions.push(decision);
            lb_sum = Some(match lb_sum {
                Some(s) => s.add(lb_l)?,
                None => lb_l,
            });
            rz_sum = Some(match rz_sum {
                Some(s) => s.add(rz_l)?,
                None => rz_l,
            });
        }

        let fin = x.rmsnorm(var_of("final_norm.gain"), NORM_EPS)?;
        let head = var_of("lm_head.weight");
        let logits = fin.matmul(head)?;
        probes.push(LinearProbe {
            name: "lm_head.weight".into(),
            input: fin,
            output: logits,
        });

        let layers = cfg.n_layers as f64;
        Ok(ForwardOut {
            logits,
            lb: lb_sum.expect("at least one layer").scale(1.0 / layers),
            rz: rz_sum.expect("at least one layer").scale(1.0 / layers),
            stats,
            router_logits,
            decisions,
            probes,
            param_vars,
        })
    }

    /// One MoE layer: route, group tokens by destination expert, run each
    /// expert once over its group, scatter gated outputs back.
    fn moe_layer<'t>(
        &self,
        tape: &'t Tape,
        layer: usize,
        x: Var<'t>,
        probes: &mut Vec<LinearProbe<'t>>,
        var_of: &dyn Fn(&str) -> Var<'t>,
    ) -> Result<(Var<'t>, RouterDecision, Var<'t>, Var<'t>)> {
        let cfg = &self.config;
        let e = cfg.effective_experts();
        let k = cfg.effective_top_k();
        let t = tape.shape_of(x)[0];

        let wr = var_of(&format!("layer{layer}.router.weight"));
        let s = x.matmul(wr)?;
        probes.push(LinearProbe {
            name: format!("layer{layer}.router.weight"),
            input: x,
            output: s,
        });
        let decision = router::route(&s.value(), k)?;

        // Gates: restricted softmax over the selected logits. Selection is
        // treated as constant; gradients flow through the gathered logits.
        let flat_sel: Vec<usize> = decision
            .selected
            .iter()
            .enumerate()
            .flat_map(|(tok, sel)| sel.iter().map(move |&i| tok * e + i))
            .collect();
        let gates = s
            .gather_elems(&flat_sel)?
            .reshape(vec![t, k])?
            .softmax_rows()?
            .reshape(vec![t * k])?;

        // Group (token, slot) pairs by expert.
        let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::new(); e];
        for (tok, sel) in decision.selected.iter().enumerate() {
            for (slot, &expert) in sel.iter().enumerate() {
                groups[expert].push((tok, slot));
            }
        }

        let mut y: Option<Var<'t>> = None;
        for (expert, group) in groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let token_idx: Vec<usize> = group.iter().map(|&(tok, _)| tok).collect();
            let gate_idx: Vec<usize> = group.iter().map(|&(tok, slot)| tok * k + slot).collect();
            let xg = x.gather_rows(&token_idx)?;
            let wg = var_of(&format!("layer{layer}.expert{expert}.w_gate"));
            let wu = var_of(&format!("layer{layer}.expert{expert}.w_up"));
            let wd = var_of(&format!("layer{layer}.expert{expert}.w_down"));
            let pre_gate = xg.matmul(wg)?;
            let pre_up = xg.matmul(wu)?;
            let hidden = pre_gate.silu().mul(pre_up)?;
            let out = hidden.matmul(wd)?;
            probes.push(LinearProbe {
                name: format!("layer{layer}.expert{expert}.w_gate"),
                input: xg,
                output: pre_gate,
            });
            probes.push(LinearProbe {
                name: format!("layer{layer}.expert{expert}.w_up"),
                input: xg,
                output: pre_up,
            });
            probes.push(LinearProbe {
                name: format!("layer{layer}.expert{expert}.w_down"),
                input: hidden,
                output: out,
            });
            let gated = out.row_scale(gates.gather_elems(&gate_idx)?)?;
            let scattered = gated.scatter_add_rows(&token_idx, t)?;
            y = Some(match y {
                Some(acc) => acc.add(scattered)?,
                None => scattered,
            });
        }
        let y = y.expect("dropless routing leaves no token unprocessed");

        // Differentiable aux losses for this layer.
        let stats = layer_stats(&decision);
        let f_const = tape.constant(
            Tensor::new(vec![e], stats.token_fraction.clone()).expect("fraction shape"),
        );
        let p_bar = s.softmax_rows()?.mean_axis0()?;
        let lb = p_bar
            .mul(f_const)?
            .sum_all()
            .scale(e as f64 / k as f64);
        let lse = s.logsumexp_rows()?;
        let rz = lse.mul(lse)?.mean_all();

        Ok((y, decision, lb, rz))
    }

    /// Next-token logits with no gradient tracking, at the model's own
    /// precision.
    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        let tape = Tape::new(self.config.precision);
        let out = self.forward(&tape, tokens, false)?;
        Ok(out.logits.value())
    }
}

/// Assemble the combined loss L_CE + α·L_LB + β·L_RZ on the tape.
pub fn combined_loss<'t>(
    out: &ForwardOut<'t>,
    targets: &[usize],
    mask: &[bool],
    alpha: f64,
    beta: f64,
) -> Result<(LossBreakdown, Var<'t>)> {
    assert!(alpha >= 0.0 && beta >= 0.0, "aux coefficients must be nonnegative");
    let ce = out.logits.cross_entropy_masked(targets, mask)?;
    let total = ce.add(out.lb.scale(alpha))?.add(out.rz.scale(beta))?;
    Ok((
        LossBreakdown {
            l_ce: ce.value().item(),
            l_lb: out.lb.value().item(),
            l_rz: out.rz.value().item(),
            alpha,
            beta,
            total: total.value().item(),
        },
        total,
    ))
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("ones")
}

fn causal_mask(t: usize) -> Tensor {
    Tensor::from_fn(vec![t, t], |i| {
        let (r, c) = (i / t, i % t);
        if c > r {
            MASK_NEG
        } else {
            0.0
        }
    })
}

/// Truncated normal (|z| <= 2) via Box-Muller, scaled by `std`.
fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
