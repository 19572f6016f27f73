use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use crate::trainer::tokenizer::{decode, encode, EOS};

use super::extract::extract_answer;
use super::scoring::LanguageModel;
use super::types::SCConfig;
use super::{EvalError, Result};

/// Decoding knobs for one sampled continuation.
#[derive(Debug, Clone, Copy)]
pub struct SampleParams {
    pub temperature: f64,
    /// Nucleus threshold; 1.0 disables truncation.
    pub top_p: f64,
    pub max_new_tokens: usize,
    /// Temperature→0 shortcut: always take the argmax, seed irrelevant.
    pub greedy: bool,
}

impl From<SCConfig> for SampleParams {
    fn from(sc: SCConfig) -> Self {
        SampleParams {
            temperature: sc.temperature,
            top_p: sc.top_p,
            max_new_tokens: sc.max_new_tokens,
            greedy: false,
        }
    }
}

/// Smallest prefix of the descending-probability order whose mass reaches
/// `top_p`; returns renormalized (index, probability) pairs.
fn nucleus(probs: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push((i, probs[i]));
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    for (_, p) in kept.iter_mut() {
        *p /= mass;
    }
    kept
}

/// Autoregressive sampling from the temperature-scaled, nucleus-truncated
/// next-token distribution. Deterministic per seed; stops at EOS or after
/// `max_new_tokens`. Returns the decoded completion text only.
pub fn sample_decode(
    model: &dyn LanguageModel,
    prompt: &str,
    params: SampleParams,
    seed: u64,
) -> Result<String> {
    if !params.greedy && !(params.temperature > 0.0) {
        return Err(EvalError::Contract("temperature must be > 0".into()));
    }
    if !(params.top_p > 0.0 && params.top_p <= 1.0) {
        return Err(EvalError::Contract("top_p must be in (0, 1]".into()));
    }
    let mut tokens = encode(prompt);
    if tokens.is_empty() {
        return Err(EvalError::Contract("prompt tokenizes to no tokens".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut generated = Vec::new();
    for _ in 0..params.max_new_tokens {
        if tokens.len() > model.max_seq_len() {
            break;
        }
        let logits = model.next_logits(&tokens)?;
        let vocab = logits.ncols();
        let row = &logits.data()[(logits.nrows() - 1) * vocab..];
        let next = if params.greedy {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap() as u32
        } else {
            let scaled: Vec<f64> = row.iter().map(|&x| x / params.temperature).collect();
            let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scaled.iter().map(|&x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|&e| e / z).collect();
            let kept = nucleus(&probs, params.top_p);
            let mut u: f64 = rng.gen();
            let mut pick = kept[kept.len() - 1].0;
            for &(i, p) in &kept {
                if u < p {
                    pick = i;
                    break;
                }
                u -= p;
            }
            pick as u32
        };
        if next == EOS {
            break;
        }
        generated.push(next);
        tokens.push(next);
    }
    Ok(decode(&generated))
}

/// Majority vote over canonicalized extractions. Absent extractions are
/// excluded; ties go to the answer whose first occurrence came earliest;
/// all-absent yields `None`. Order of equal-count reordering cannot change
/// the winner, only the (excluded) absent entries can.
pub fn self_consistency_votes<I>(samples: I, patterns: &[Regex]) -> Option<String>
where
    I: IntoIterator<Item = String>,
{
    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    let mut order = 0usize;
    for completion in samples {
        if let Some(answer) = extract_answer(&completion, patterns) {
            let entry = counts.entry(answer).or_insert((0, order));
            entry.0 += 1;
            order += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .map(|(answer, _)| answer)
}

/// Draw N independent seeded continuations and vote on their extracted
/// answers.
pub fn self_consistency(
    model: &dyn LanguageModel,
    prompt: &str,
    sc: &SCConfig,
    patterns: &[Regex],
    seed: u64,
) -> Result<Option<String>> {
    sc.validate()?;
    let params = SampleParams::from(*sc);
    let mut samples = Vec::with_capacity(sc.n_samples);
    for i in 0..sc.n_samples {
        let sample_seed = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        samples.push(sample_decode(model, prompt, params, sample_seed)?);
    }
    Ok(self_consistency_votes(samples, patterns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalsuite::extract::default_patterns;
    use crate::numerics::Tensor;

    /// Fixed next-token distribution regardless of context.
    struct FixedDist {
        logits: Vec<f64>,
    }

    impl LanguageModel for FixedDist {
        fn vocab_size(&self) -> usize {
            self.logits.len()
        }
        fn max_seq_len(&self) -> usize {
            4096
        }
        fn next_logits(&self, tokens: &[u32]) -> Result<Tensor> {
            let v = self.logits.len();
            let mut data = Vec::with_capacity(tokens.len() * v);
            for _ in 0..tokens.len() {
                data.extend(&self.logits);
            }
            Ok(Tensor::new(vec![tokens.len(), v], data).unwrap())
        }
    }

    fn dist(probs: &[f64]) -> FixedDist {
        // Pad the tiny distribution into a byte-vocab-sized model so the
        // sampled ids decode as bytes '0'.. etc. Token ids 48.. = '0'..
        let mut logits = vec![-1e9; 300];
        for (i, &p) in probs.iter().enumerate() {
            logits[48 + i] = p.ln();
        }
        FixedDist { logits }
    }

    #[test]
    fn greedy_takes_unique_mode_regardless_of_seed() {
        let model = dist(&[0.2, 0.5, 0.3]);
        let params = SampleParams {
            temperature: 1.0,
            top_p: 1.0,
            max_new_tokens: 1,
            greedy: true,
        };
        for seed in 0..5 {
            assert_eq!(sample_decode(&model, "q", params, seed).unwrap(), "1");
        }
    }

    #[test]
    fn nucleus_hand_rule() {
        // p=0.5 on [0.6, 0.3, 0.1]: only the 0.6 token survives.
        let kept = nucleus(&[0.6, 0.3, 0.1], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].0, 0);
        assert!((kept[0].1 - 1.0).abs() < 1e-12);

        // Sampling end-to-end can only ever produce that token.
        let model = dist(&[0.6, 0.3, 0.1]);
        let params = SampleParams {
            temperature: 1.0,
            top_p: 0.5,
            max_new_tokens: 1,
            greedy: false,
        };
        for seed in 0..20 {
            assert_eq!(sample_decode(&model, "q", params, seed).unwrap(), "0");
        }
    }

    #[test]
    fn top_p_one_is_plain_softmax_sampling() {
        let model = dist(&[0.05, 0.9, 0.05]);
        let params = SampleParams {
            temperature: 1.0,
            top_p: 1.0,
            max_new_tokens: 1,
            greedy: false,
        };
        let mut seen_mode = 0;
        for seed in 0..50 {
            if sample_decode(&model, "q", params, seed).unwrap() == "1" {
                seen_mode += 1;
            }
        }
        assert!(seen_mode > 35, "mode sampled {seen_mode}/50 times");
    }

    #[test]
    fn sampling_deterministic_per_seed() {
        let model = dist(&[0.4, 0.3, 0.3]);
        let params = SampleParams {
            temperature: 0.8,
            top_p: 0.95,
            max_new_tokens: 8,
            greedy: false,
        };
        let a = sample_decode(&model, "q", params, 7).unwrap();
        let b = sample_decode(&model, "q", params, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strict_majority_wins() {
        let votes = ["#### 4", "#### 4", "#### 5"].map(|s| s.to_string());
        assert_eq!(
            self_consistency_votes(votes, &default_patterns()).as_deref(),
            Some("4")
        );
    }

    #[test]
    fn absent_extractions_excluded_and_all_absent_is_none() {
        let votes = ["nothing", "#### 7", "still nothing"].map(|s| s.to_string());
        assert_eq!(
            self_consistency_votes(votes, &default_patterns()).as_deref(),
            Some("7")
        );
        let none = ["a", "b"].map(|s| s.to_string());
        assert_eq!(self_consistency_votes(none, &default_patterns()), None);
    }

    #[test]
    fn ties_break_to_earliest_first_occurrence() {
        let votes = ["#### 9", "#### 3", "#### 3", "#### 9"].map(|s| s.to_string());
        assert_eq!(
            self_consistency_votes(votes, &default_patterns()).as_deref(),
            Some("9")
        );
    }

    #[test]
    fn vote_invariant_to_sample_order_among_extracted() {
        let a = ["#### 1", "#### 2", "#### 2"].map(|s| s.to_string());
        let b = ["#### 2", "#### 2", "#### 1"].map(|s| s.to_string());
        assert_eq!(
            self_consistency_votes(a, &default_patterns()),
            self_consistency_votes(b, &default_patterns())
        );
    }
}
