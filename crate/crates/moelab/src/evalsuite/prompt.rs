use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::types::TaskSpec;
use super::{EvalError, Result};

/// Assemble the prompt for one item.
///
/// Zero shots yields the bare question. Otherwise, demonstrations are a
/// fixed seeded sample of the task's items — one shuffle per (task, seed),
/// not per item — with the scored item excluded from its own prompt.
pub fn build_fewshot_prompt(
    task: &TaskSpec,
    item_index: usize,
    shots: usize,
    seed: u64,
) -> Result<String> {
    if item_index >= task.items.len() {
        return Err(EvalError::Contract(format!(
            "item index {item_index} out of range for {} items",
            task.items.len()
        )));
    }
    let item = &task.items[item_index];
    if shots == 0 {
        return Ok(item.question.clone());
    }
    // Need `shots` demos that are not the scored item itself.
    if shots >= task.items.len() {
        return Err(EvalError::Contract(format!(
            "{shots} shots requested but only {} items available",
            task.items.len()
        )));
    }

    let mut order: Vec<usize> = (0..task.items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut prompt = String::new();
    let mut taken = 0;
    for &demo in &order {
        if taken == shots {
            break;
        }
        if demo == item_index {
            continue;
        }
        let d = &task.items[demo];
        prompt.push_str(&format!("Q: {}\nA: {}\n\n", d.question, d.answer));
        taken += 1;
    }
    prompt.push_str(&format!("Q: {}\nA:", item.question));
    Ok(prompt)
}
