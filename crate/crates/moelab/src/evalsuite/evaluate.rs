use regex::Regex;

use super::extract::{canonicalize, default_patterns, extract_answer};
use super::prompt::build_fewshot_prompt;
use super::sampling::{sample_decode, self_consistency, SampleParams};
use super::scoring::{continuation, score_answer, LanguageModel};
use super::types::{EvalResult, ItemRecord, SCConfig, TaskKind, TaskSpec};
use super::Result;

/// What to measure over a task.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalMode {
    /// Answer-token loss on the gold answer (gold choice only, for
    /// multiple choice).
    TaskLoss,
    /// One greedy sample per item, extraction, exact canonical match.
    Pass1 { max_new_tokens: usize },
    /// N-sample majority vote per item.
    SelfConsistency(SCConfig),
}

impl EvalMode {
    pub fn label(&self) -> &'static str {
        match self {
            EvalMode::TaskLoss => "taskloss",
            EvalMode::Pass1 { .. } => "pass1",
            EvalMode::SelfConsistency(_) => "self-consistency",
        }
    }
}

fn task_patterns(task: &TaskSpec) -> Vec<Regex> {
    if task.patterns.is_empty() {
        default_patterns()
    } else {
        task.patterns
            .iter()
            .filter_map(|p| Regex::new(p).ok())
            .collect()
    }
}

/// Run one task end to end and aggregate per-item records.
pub fn evaluate(
    model: &dyn LanguageModel,
    task: &TaskSpec,
    mode: &EvalMode,
    run_id: &str,
    seed: u64,
) -> Result<EvalResult> {
    task.validate()?;
    let patterns = task_patterns(task);
    let mut records = Vec::with_capacity(task.items.len());
    for (index, item) in task.items.iter().enumerate() {
        let prompt = build_fewshot_prompt(task, index, task.shots, seed)?;
        let record = match mode {
            EvalMode::TaskLoss => {
                let score = score_answer(model, &prompt, &continuation(task.shots, &item.answer))?;
                ItemRecord {
                    index,
                    loss: Some(score.per_token),
                    predicted: None,
                    gold: item.answer.clone(),
                    correct: None,
                }
            }
            EvalMode::Pass1 { max_new_tokens } => {
                let params = SampleParams {
                    temperature: 1.0,
                    top_p: 1.0,
                    max_new_tokens: *max_new_tokens,
                    greedy: true,
                };
                let completion = sample_decode(model, &prompt, params, seed)?;
                let predicted = extract_answer(&completion, &patterns);
                grade(index, item.answer.clone(), predicted, task.kind)
            }
            EvalMode::SelfConsistency(sc) => {
                let item_seed = seed ^ (index as u64).wrapping_mul(0x517C_C1B7_2722_0A95);
                let predicted = self_consistency(model, &prompt, sc, &patterns, item_seed)?;
                grade(index, item.answer.clone(), predicted, task.kind)
            }
        };
        records.push(record);
    }
    Ok(EvalResult::from_items(
        run_id,
        &task.name,
        mode.label(),
        task.shots,
        records,
    ))
}

fn grade(
    index: usize,
    gold: String,
    predicted: Option<String>,
    _kind: TaskKind,
) -> ItemRecord {
    // Absent extraction counts as incorrect, never a crash.
    let correct = predicted
        .as_deref()
        .map(|p| p == canonicalize(&gold))
        .unwrap_or(false);
    ItemRecord {
        index,
        loss: None,
        predicted,
        gold,
        correct: Some(correct),
    }
}
