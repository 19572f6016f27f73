use crate::model::MoeModel;
use crate::numerics::Tensor;
use crate::trainer::tokenizer::encode;

use super::prompt::build_fewshot_prompt;
use super::types::{EvalResult, ItemRecord, TaskKind, TaskSpec};
use super::{EvalError, Result};

/// Anything that can produce next-token logits; lets tests score against
/// stub distributions with the exact code path used for the real model.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    /// [T, vocab] logits; row t scores the token following position t.
    fn next_logits(&self, tokens: &[u32]) -> Result<Tensor>;
}

impl LanguageModel for MoeModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn next_logits(&self, tokens: &[u32]) -> Result<Tensor> {
        self.logits(tokens).map_err(EvalError::Model)
    }
}

fn log_softmax_pick(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

/// Raw and per-token-normalized answer loss for one continuation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChoiceScore {
    /// Summed answer-token negative log-likelihood.
    pub raw: f64,
    /// `raw` divided by the answer token count.
    pub per_token: f64,
    pub n_answer_tokens: usize,
}

pub fn score_answer(
    model: &dyn LanguageModel,
    prompt: &str,
    answer: &str,
) -> Result<ChoiceScore> {
    let prompt_tokens = encode(prompt);
    let answer_tokens = encode(answer);
    if prompt_tokens.is_empty() || answer_tokens.is_empty() {
        return Err(EvalError::Contract(
            "prompt and answer must each tokenize to >=1 token".into(),
        ));
    }
    let mut stream = prompt_tokens.clone();
    stream.extend(&answer_tokens);
    // The model consumes all but the final token; the final answer token
    // is only ever a target.
    let needed = stream.len() - 1;
    if needed > model.max_seq_len() {
        return Err(EvalError::Truncation {
            needed,
            max: model.max_seq_len(),
        });
    }
    let logits = model.next_logits(&stream[..needed])?;
    let vocab = logits.ncols();
    let mut raw = 0.0;
    // Position p predicts stream[p + 1]; answer tokens start at index
    // prompt_tokens.len().
    for (offset, &target) in answer_tokens.iter().enumerate() {
        let p = prompt_tokens.len() + offset - 1;
        let row = &logits.data()[p * vocab..(p + 1) * vocab];
        raw -= log_softmax_pick(row, target as usize);
    }
    Ok(ChoiceScore {
        raw,
        per_token: raw / answer_tokens.len() as f64,
        n_answer_tokens: answer_tokens.len(),
    })
}

/// Teacher-forced cross-entropy averaged over the answer tokens only.
pub fn answer_token_loss(
    model: &dyn LanguageModel,
    prompt: &str,
    answer: &str,
) -> Result<f64> {
    Ok(score_answer(model, prompt, answer)?.per_token)
}

/// Score a multiple-choice task: every choice is scored as a continuation
/// of the prompt, prediction is the argmin of per-token-normalized loss,
/// ties toward the earlier-listed choice.
pub fn mc_accuracy(
    model: &dyn LanguageModel,
    task: &TaskSpec,
    run_id: &str,
    seed: u64,
) -> Result<EvalResult> {
    if task.kind != TaskKind::MultipleChoice {
        return Err(EvalError::Contract(format!(
            "mc_accuracy needs a multiple-choice task, got {:?}",
            task.kind
        )));
    }
    task.validate()?;
    let mut records = Vec::with_capacity(task.items.len());
    for (index, item) in task.items.iter().enumerate() {
        let prompt = build_fewshot_prompt(task, index, task.shots, seed)?;
        let choices = item.choices.as_ref().expect("validated above");
        let mut best: Option<(usize, f64)> = None;
        let mut gold_loss = None;
        for (ci, choice) in choices.iter().enumerate() {
            let score = score_answer(model, &prompt, &continuation(task.shots, choice))?;
            if *choice == item.answer {
                gold_loss = Some(score.per_token);
            }
            // Strict improvement only, so earlier-listed choices win ties.
            if best.map_or(true, |(_, b)| score.per_token < b) {
                best = Some((ci, score.per_token));
            }
        }
        let (pred, _) = best.expect(">=2 choices");
        records.push(ItemRecord {
            index,
            loss: gold_loss,
            predicted: Some(choices[pred].clone()),
            gold: item.answer.clone(),
            correct: Some(choices[pred] == item.answer),
        });
    }
    Ok(EvalResult::from_items(
        run_id, &task.name, "mc", task.shots, records,
    ))
}

/// The answer text as it continues the prompt: few-shot prompts end with
/// "A:", zero-shot prompts are the bare question, and both get one space
/// before the answer.
pub(super) fn continuation(_shots: usize, answer: &str) -> String {
    format!(" {answer}")
}
