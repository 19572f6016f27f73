//! Fisher-information curvature probe: per-layer maximum eigenvalue under
//! a Kronecker-factored (K-FAC) approximation, λ_max(A⊗G) = λ_max(A)·λ_max(G),
//! with power iteration on the factors and labels sampled from the model's
//! own softmax (the sampled-label Fisher).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, MoeModel};
use crate::numerics::{NumericsError, Tape, Tensor};

#[derive(Debug, Error)]
pub enum CurvatureError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, CurvatureError>;

/// Running second-moment factors for one linear layer: A over its input
/// activations (in×in) and G over its output gradients (out×out).
#[derive(Debug, Clone)]
pub struct KroneckerFactorPair {
    pub a: Tensor,
    pub g: Tensor,
    /// Number of accumulated batches (each contributes a token-mean).
    pub samples: u64,
}

impl KroneckerFactorPair {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        KroneckerFactorPair {
            a: Tensor::zeros(vec![in_dim, in_dim]),
            g: Tensor::zeros(vec![out_dim, out_dim]),
            samples: 0,
        }
    }

    /// A += mean over tokens of a·aᵀ; G += mean over tokens of g·gᵀ.
    pub fn accumulate(&mut self, activations: &Tensor, grads: &Tensor) -> Result<()> {
        let t = activations.nrows();
        if grads.nrows() != t {
            return Err(CurvatureError::Contract(format!(
                "{} activation rows vs {} gradient rows",
                t,
                grads.nrows()
            )));
        }
        if activations.ncols() != self.a.nrows() || grads.ncols() != self.g.nrows() {
            return Err(CurvatureError::Contract(format!(
                "factor dims ({}, {}) but batch dims ({}, {})",
                self.a.nrows(),
                self.g.nrows(),
                activations.ncols(),
                grads.ncols()
            )));
        }
        if t == 0 {
            return Ok(());
        }
        add_gram(&mut self.a, activations, 1.0 / t as f64);
        add_gram(&mut self.g, grads, 1.0 / t as f64);
        self.samples += 1;
        Ok(())
    }

    /// Factors normalized by the sample count.
    pub fn normalized(&self) -> Result<(Tensor, Tensor)> {
        if self.samples == 0 {
            return Err(CurvatureError::Contract(
                "eigen query before any accumulation".into(),
            ));
        }
        let s = 1.0 / self.samples as f64;
        let scale = |m: &Tensor| {
            Tensor::new(m.shape().to_vec(), m.data().iter().map(|x| x * s).collect())
                .expect("same shape")
        };
        Ok((scale(&self.a), scale(&self.g)))
    }
}

/// M += scale · Xᵀ·X for row-major X[t, n].
fn add_gram(m: &mut Tensor, x: &Tensor, scale: f64) {
    let n = x.ncols();
    let t = x.nrows();
    let data = m.data_mut();
    for row in 0..t {
        let xr = &x.data()[row * n..(row + 1) * n];
        for i in 0..n {
            let xi = xr[i] * scale;
            if xi == 0.0 {
                continue;
            }
            for j in 0..n {
                data[i * n + j] += xi * xr[j];
            }
        }
    }
}

/// Outcome of a power-iteration eigenvalue query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerResult {
    pub lambda: f64,
    pub converged: bool,
    pub iters: usize,
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration with a
/// fixed seeded start vector; stops when successive Rayleigh quotients
/// differ by less than `tol`.
pub fn max_eig_power(m: &Tensor, max_iters: usize, tol: f64) -> Result<PowerResult> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(CurvatureError::Contract(format!(
            "power iteration needs a square matrix, got {:?}",
            m.shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xE16E);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for iter in 1..=max_iters {
        let mut w = vec![0.0; n];
        for i in 0..n {
            let row = &m.data()[i * n..(i + 1) * n];
            w[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let rayleigh: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let norm = normalize(&mut w);
        if norm == 0.0 {
            // Annihilated: the matrix is zero on this subspace (or zero).
            return Ok(PowerResult {
                lambda: 0.0,
                converged: true,
                iters: iter,
            });
        }
        if (rayleigh - lambda).abs() < tol && iter > 1 {
            return Ok(PowerResult {
                lambda: rayleigh,
                converged: true,
                iters: iter,
            });
        }
        lambda = rayleigh;
        v = w;
    }
    Ok(PowerResult {
        lambda,
        converged: false,
        iters: max_iters,
    })
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// λ_max(A⊗G) without materializing the Kronecker product: for PSD
/// factors it equals λ_max(A)·λ_max(G).
pub fn kfac_layer_max_eig(pair: &KroneckerFactorPair) -> Result<PowerResult> {
    let (a, g) = pair.normalized()?;
    let ra = max_eig_power(&a, 1000, 1e-12)?;
    let rg = max_eig_power(&g, 1000, 1e-12)?;
    Ok(PowerResult {
        lambda: ra.lambda * rg.lambda,
        converged: ra.converged && rg.converged,
        iters: ra.iters.max(rg.iters),
    })
}

/// One row of the emitted eigenvalue table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEig {
    pub run_id: String,
    pub layer_name: String,
    pub lambda_max: f64,
    pub converged: bool,
}

/// Probe configuration; recorded alongside results.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Tokens consumed from the probe stream.
    pub tokens: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Router matrices count as linear layers unless excluded.
    pub include_router: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            tokens: 4096,
            seq_len: 128,
            seed: 0,
            include_router: true,
        }
    }
}

/// Every dense projection matrix of the architecture, in parameter-store
/// order; embeddings excluded.
pub fn dense_layer_names(config: &ModelConfig, include_router: bool) -> Vec<String> {
    let mut names = Vec::new();
    for l in 0..config.n_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            names.push(format!("layer{l}.attn.{w}"));
        }
        if include_router {
            names.push(format!("layer{l}.router.weight"));
        }
        for x in 0..config.effective_experts() {
            for w in ["w_gate", "w_up", "w_down"] {
                names.push(format!("layer{l}.expert{x}.{w}"));
            }
        }
    }
    names.push("lm_head.weight".to_string());
    names
}

/// Accumulate K-FAC factors for every probed layer over a token stream and
/// report per-layer λ_max plus the model-wide maximum.
///
/// Labels are drawn from the model's own softmax (seeded), making the
/// gradient second moments a Monte-Carlo Fisher rather than the empirical
/// one. Layers that saw no tokens (idle experts) report λ = 0.
pub fn model_max_eig(
    model: &MoeModel,
    probe_stream: &[u32],
    probe: &ProbeConfig,
    run_id: &str,
) -> Result<(Vec<LayerEig>, f64)> {
    if probe_stream.len() < 2 {
        return Err(CurvatureError::Contract(
            "probe stream needs at least two tokens".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let mut pairs: BTreeMap<String, KroneckerFactorPair> = BTreeMap::new();

    let mut at = 0usize;
    let mut consumed = 0usize;
    while consumed < probe.tokens && at + 2 <= probe_stream.len() {
        let take = probe.seq_len.min(probe_stream.len() - at);
        let chunk = &probe_stream[at..at + take];
        at += take;
        consumed += take;
        accumulate_chunk(model, chunk, &mut rng, &mut pairs)?;
    }

    let mut table = Vec::new();
    let mut overall: f64 = 0.0;
    for name in dense_layer_names(&model.config, probe.include_router) {
        let (lambda, converged) = match pairs.get(&name) {
            Some(pair) => {
                let r = kfac_layer_max_eig(pair)?;
                (r.lambda, r.converged)
            }
            None => (0.0, true),
        };
        overall = overall.max(lambda);
        table.push(LayerEig {
            run_id: run_id.to_string(),
            layer_name: name,
            lambda_max: lambda,
            converged,
        });
    }
    Ok((table, overall))
}

fn accumulate_chunk(
    model: &MoeModel,
    chunk: &[u32],
    rng: &mut ChaCha8Rng,
    pairs: &mut BTreeMap<String, KroneckerFactorPair>,
) -> Result<()> {
    let tape = Tape::new(model.config.precision);
    let out = model.forward(&tape, chunk, true)?;
    let logits = out.logits.value();
    let t = logits.nrows();
    let vocab = logits.ncols();

    // Sampled-label Fisher: one label per position from the model's own
    // distribution.
    let mut labels = Vec::with_capacity(t);
    for p in 0..t {
        let row = &logits.data()[p * vocab..(p + 1) * vocab];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut u: f64 = rng.gen::<f64>() * z;
        let mut pick = vocab - 1;
        for (i, &e) in exps.iter().enumerate() {
            if u < e {
                pick = i;
                break;
            }
            u -= e;
        }
        labels.push(pick);
    }

    // Summed (not averaged) CE so each token's gradient is its own score.
    let ce = out
        .logits
        .cross_entropy_masked(&labels, &vec![true; t])?
        .scale(t as f64);
    tape.backward(ce)?;

    for p in &out.probes {
        let acts = p.input.value();
        let grads = match p.output.grad() {
            Some(g) => g,
            None => continue,
        };
        let pair = pairs
            .entry(p.name.clone())
            .or_insert_with(|| KroneckerFactorPair::new(acts.ncols(), grads.ncols()));
        pair.accumulate(&acts, &grads)?;
    }
    Ok(())
}
