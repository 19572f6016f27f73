use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    MultipleChoice,
    OpenEnded,
}

/// One evaluation item; the on-disk JSON-lines shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub question: String,
    /// Gold answer string; for multiple choice, must equal exactly one
    /// entry of `choices`.
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
}

/// A named task: its items plus the protocol knobs used to score them.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub items: Vec<EvalItem>,
    pub shots: usize,
    /// Extraction regexes in priority order; empty means the defaults.
    pub patterns: Vec<String>,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, kind: TaskKind, items: Vec<EvalItem>) -> Result<Self> {
        let spec = TaskSpec {
            name: name.into(),
            kind,
            items,
            shots: 0,
            patterns: Vec::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, item) in self.items.iter().enumerate() {
            if item.question.is_empty() || item.answer.is_empty() {
                return Err(EvalError::Contract(format!(
                    "item {i}: question and answer must be nonempty"
                )));
            }
            match (self.kind, &item.choices) {
                (TaskKind::MultipleChoice, Some(choices)) => {
                    if choices.len() < 2 {
                        return Err(EvalError::Contract(format!(
                            "item {i}: multiple choice needs >=2 choices"
                        )));
                    }
                    let gold = choices.iter().filter(|c| **c == item.answer).count();
                    if gold != 1 {
                        return Err(EvalError::Contract(format!(
                            "item {i}: gold answer must appear exactly once among choices, found {gold}"
                        )));
                    }
                }
                (TaskKind::MultipleChoice, None) => {
                    return Err(EvalError::Contract(format!(
                        "item {i}: multiple choice item has no choices"
                    )));
                }
                (TaskKind::OpenEnded, _) => {}
            }
        }
        Ok(())
    }
}

/// Self-consistency sampling configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SCConfig {
    pub n_samples: usize,
    pub temperature: f64,
    /// Nucleus (top-p) threshold.
    pub top_p: f64,
    pub max_new_tokens: usize,
}

impl Default for SCConfig {
    /// The operating point used throughout: 128 samples at temperature
    /// 0.6 with nucleus 0.95, up to 1024 new tokens, zero-shot.
    fn default() -> Self {
        SCConfig {
            n_samples: 128,
            temperature: 0.6,
            top_p: 0.95,
            max_new_tokens: 1024,
        }
    }
}

impl SCConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 1 {
            return Err(EvalError::Contract("n_samples must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(EvalError::Contract("temperature must be > 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(EvalError::Contract("top_p must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-item scoring record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted: Option<String>,
    pub gold: String,
    pub correct: Option<bool>,
}

/// Aggregated task result; serialized one object per JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub run_id: String,
    pub task: String,
    pub mode: String,
    pub shots: usize,
    pub n_items: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip)]
    pub items: Vec<ItemRecord>,
}

impl EvalResult {
    /// accuracy = correct ÷ total, exactly; None when nothing was graded.
    pub fn from_items(
        run_id: &str,
        task: &str,
        mode: &str,
        shots: usize,
        items: Vec<ItemRecord>,
    ) -> EvalResult {
        let n_items = items.len();
        let losses: Vec<f64> = items.iter().filter_map(|r| r.loss).collect();
        let task_loss = if losses.is_empty() {
            None
        } else {
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        };
        let graded = items.iter().filter(|r| r.correct.is_some()).count();
        let accuracy = if graded == 0 {
            None
        } else {
            let correct = items.iter().filter(|r| r.correct == Some(true)).count();
            Some(correct as f64 / graded as f64)
        };
        EvalResult {
            run_id: run_id.to_string(),
            task: task.to_string(),
            mode: mode.to_string(),
            shots,
            n_items,
            task_loss,
            accuracy,
            items,
        }
    }
}

/// Load a JSON-lines task file: one `{question, answer, choices?}` per line.
pub fn load_task_file(path: &Path) -> Result<Vec<EvalItem>> {
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: EvalItem =
            serde_json::from_str(&line).map_err(|e| EvalError::MalformedItem {
                file: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        items.push(item);
    }
    Ok(items)
}
