use serde::{Deserialize, Serialize};

use crate::analysis::RunRecord;
use crate::budget;
use crate::model::{combined_loss, ModelConfig, MoeModel};
use crate::numerics::{Tape, Tensor};

use super::checkpoint::Checkpoint;
use super::corpus::Corpus;
use super::optim::{adamw_step, AdamHyper, OptimState};
use super::schedule::{lr_at, Schedule};
use super::{Result, TrainError};

fn default_record_every() -> u64 {
    50
}
fn default_val_seqs() -> usize {
    8
}

/// Everything one training run needs besides the corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainParams {
    pub run_id: String,
    pub config: ModelConfig,
    pub schedule: Schedule,
    #[serde(default)]
    pub hyper: AdamHyper,
    /// Load-balance coefficient α.
    pub alpha: f64,
    /// Router-z coefficient β.
    pub beta: f64,
    pub seed: u64,
    pub seq_len: usize,
    pub batch_seqs: usize,
    pub token_budget: u64,
    #[serde(default = "default_record_every")]
    pub record_every: u64,
    #[serde(default = "default_val_seqs")]
    pub val_seqs: usize,
    /// Never advance the data cursor: every step sees the same batch
    /// (the overfit smoke mode).
    #[serde(default)]
    pub hold_batch: bool,
}

pub struct TrainOutcome {
    pub records: Vec<RunRecord>,
    pub model: MoeModel,
    pub optim: OptimState,
    pub step: u64,
    pub tokens_seen: u64,
    pub data_cursor: u64,
}

/// Train from scratch.
pub fn train_run(
    params: &TrainParams,
    corpus: &Corpus,
    on_record: &mut dyn FnMut(&RunRecord),
) -> Result<TrainOutcome> {
    let model = MoeModel::init(params.config.clone(), params.seed)?;
    let optim = OptimState::new(&model.params, params.hyper);
    train_loop(params, corpus, model, optim, 0, 0, 0, on_record)
}

/// Resume a run from a checkpoint; replays exactly as if uninterrupted.
pub fn resume_run(
    params: &TrainParams,
    corpus: &Corpus,
    ckpt: Checkpoint,
    on_record: &mut dyn FnMut(&RunRecord),
) -> Result<TrainOutcome> {
    ckpt.validate_against(&params.config)?;
    train_loop(
        params,
        corpus,
        ckpt.model,
        ckpt.optim,
        ckpt.schedule_step,
        ckpt.tokens_seen,
        ckpt.data_cursor,
        on_record,
    )
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    params: &TrainParams,
    corpus: &Corpus,
    mut model: MoeModel,
    mut optim: OptimState,
    start_step: u64,
    mut tokens_seen: u64,
    mut cursor: u64,
    on_record: &mut dyn FnMut(&RunRecord),
) -> Result<TrainOutcome> {
    let train_stream = corpus.train_tokens();
    let val_stream = corpus.val_tokens();
    let seq = params.seq_len;
    if train_stream.len() < seq + 1 {
        return Err(TrainError::InvalidSetup(format!(
            "train stream of {} tokens shorter than seq_len+1 = {}",
            train_stream.len(),
            seq + 1
        )));
    }
    let tokens_per_step = (params.batch_seqs * seq) as u64;
    let total_steps = (params.token_budget / tokens_per_step).max(1);
    let n_params = model.params.len();
    let mut records = Vec::new();

    for step in start_step..total_steps {
        let mut grads: Vec<Option<Tensor>> = vec![None; n_params];
        let mut ce_sum = 0.0;
        let mut lb_sum = 0.0;
        let mut rz_sum = 0.0;
        let mut load: Vec<Vec<f64>> = Vec::new();
        let batch_scale = 1.0 / params.batch_seqs as f64;

        for _ in 0..params.batch_seqs {
            if cursor as usize + seq + 1 > train_stream.len() {
                cursor = 0;
            }
            let window = &train_stream[cursor as usize..cursor as usize + seq + 1];
            if !params.hold_batch {
                cursor += seq as u64;
            }
            let inputs = &window[..seq];
            let targets: Vec<usize> = window[1..].iter().map(|&t| t as usize).collect();
            let mask = vec![true; seq];

            let tape = Tape::new(model.config.precision);
            let out = model.forward(&tape, inputs, true)?;
            let (breakdown, total) =
                combined_loss(&out, &targets, &mask, params.alpha, params.beta)?;
            if !breakdown.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            tape.backward(total)?;

            ce_sum += breakdown.l_ce * batch_scale;
            lb_sum += breakdown.l_lb * batch_scale;
            rz_sum += breakdown.l_rz * batch_scale;
            if load.is_empty() {
                load = out.stats.iter().map(|s| vec![0.0; s.token_fraction.len()]).collect();
            }
            for (layer, s) in out.stats.iter().enumerate() {
                for (acc, f) in load[layer].iter_mut().zip(&s.token_fraction) {
                    *acc += f * batch_scale;
                }
            }
            for (i, (_, var)) in out.param_vars.iter().enumerate() {
                if let Some(g) = var.grad() {
                    let scaled = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().map(|x| x * batch_scale).collect(),
                    )
                    .expect("grad shape");
                    grads[i] = Some(match grads[i].take() {
                        Some(mut acc) => {
                            for (a, s) in acc.data_mut().iter_mut().zip(scaled.data()) {
                                *a += s;
                            }
                            acc
                        }
                        None => scaled,
                    });
                }
            }
        }

        let lr = lr_at(&params.schedule, step + 1);
        adamw_step(&mut model.params, &grads, &mut optim, lr, model.config.precision)?;
        tokens_seen += tokens_per_step;
        let done = step + 1 == total_steps;

        if done || (step + 1) % params.record_every == 0 {
            let val_ce = validation_ce(&model, &val_stream, seq, params.val_seqs)?;
            let record = make_record(
                params, &model.config, step + 1, tokens_seen, lr, ce_sum, val_ce, lb_sum,
                rz_sum, Some(load.clone()),
            );
            on_record(&record);
            records.push(record);
        }
    }

    Ok(TrainOutcome {
        records,
        model,
        optim,
        step: total_steps,
        tokens_seen,
        data_cursor: cursor,
    })
}

/// Validation cross-entropy (CE only, auxiliary losses excluded).
pub fn validation_ce(
    model: &MoeModel,
    val_stream: &[u32],
    seq_len: usize,
    max_seqs: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut at = 0usize;
    while at + seq_len + 1 <= val_stream.len() && count < max_seqs {
        let window = &val_stream[at..at + seq_len + 1];
        let inputs = &window[..seq_len];
        let targets: Vec<usize> = window[1..].iter().map(|&t| t as usize).collect();
        let tape = Tape::new(model.config.precision);
        let out = model.forward(&tape, inputs, false)?;
        let ce = out
            .logits
            .cross_entropy_masked(&targets, &vec![true; seq_len])?;
        total += ce.value().item();
        count += 1;
        at += seq_len;
    }
    if count == 0 {
        // Validation stream shorter than one window; fall back to what's there.
        if val_stream.len() < 2 {
            return Err(TrainError::InvalidSetup(
                "validation stream too short to score".into(),
            ));
        }
        let inputs = &val_stream[..val_stream.len() - 1];
        let targets: Vec<usize> = val_stream[1..].iter().map(|&t| t as usize).collect();
        let tape = Tape::new(model.config.precision);
        let out = model.forward(&tape, inputs, false)?;
        let ce = out
            .logits
            .cross_entropy_masked(&targets, &vec![true; targets.len()])?;
        return Ok(ce.value().item());
    }
    Ok(total / count as f64)
}

#[allow(clippy::too_many_arguments)]
fn make_record(
    params: &TrainParams,
    config: &ModelConfig,
    step: u64,
    tokens_seen: u64,
    lr: f64,
    train_ce: f64,
    val_ce: f64,
    lb: f64,
    rz: f64,
    expert_load: Option<Vec<Vec<f64>>>,
) -> RunRecord {
    let (total, active) = budget::count_params(config);
    RunRecord {
        run_id: params.run_id.clone(),
        step,
        tokens_seen,
        d: config.d_model,
        n_layers: config.n_layers,
        n_experts: config.n_experts,
        top_k: config.effective_top_k(),
        granularity: config.granularity,
        total_params: total,
        active_params: active,
        sparsity: budget::sparsity_of(config),
        lr,
        train_ce,
        val_ce,
        lb_loss: lb,
        rz_loss: rz,
        vocab: Some(config.vocab_size),
        heads: Some(config.n_heads),
        expert_load,
        tasks: None,
    }
}
