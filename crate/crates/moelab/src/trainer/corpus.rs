use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{encode, EOS};

fn default_split() -> (u32, u32) {
    (99, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// Key→value fact sentences plus QA probes over seen facts; rewards
    /// capacity.
    MemoryRecall,
    /// Multi-step integer word problems with worked solutions ending in
    /// `#### n`; rewards multi-step computation.
    ChainArithmetic,
    /// Alternating mix of the two.
    Mixture,
}

/// Seeded synthetic corpus description. Generation is byte-deterministic
/// given (kind, seed, token_count).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub kind: GeneratorKind,
    pub seed: u64,
    pub token_count: u64,
    /// Train:validation document ratio.
    #[serde(default = "default_split")]
    pub split: (u32, u32),
}

/// Generated corpus: disjoint train/validation documents, packed token
/// streams, and paired eval items over seen facts/problems.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train_docs: Vec<String>,
    pub val_docs: Vec<String>,
    /// (question, gold answer) pairs answerable from the train stream.
    pub eval_items: Vec<(String, String)>,
}

impl Corpus {
    /// Documents concatenated with EOS separators, no cross-document
    /// attention masking.
    pub fn pack(docs: &[String]) -> Vec<u32> {
        let mut out = Vec::new();
        for doc in docs {
            out.extend(encode(doc));
            out.push(EOS);
        }
        out
    }

    pub fn train_tokens(&self) -> Vec<u32> {
        Self::pack(&self.train_docs)
    }

    pub fn val_tokens(&self) -> Vec<u32> {
        Self::pack(&self.val_docs)
    }
}

/// Re-evaluate a chain-arithmetic solution: parse each `a op b = c` step,
/// recompute it, and return the final `#### n` answer if every step checks
/// out. Independent of the generator's own arithmetic.
pub fn verify_chain_answer(solution: &str) -> Option<i64> {
    let mut last: Option<i64> = None;
    for line in solution.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("#### ") {
            let answer: i64 = rest.trim().parse().ok()?;
            return if last == Some(answer) { Some(answer) } else { None };
        }
        for step in line.split(". ") {
            let step = step.trim().trim_end_matches('.');
            if step.is_empty() {
                continue;
            }
            let (lhs, rhs) = step.split_once(" = ")?;
            let expected: i64 = rhs.trim().parse().ok()?;
            let parts: Vec<&str> = lhs.split_whitespace().collect();
            if parts.len() != 3 {
                return None;
            }
            let a: i64 = parts[0].parse().ok()?;
            let b: i64 = parts[2].parse().ok()?;
            let got = match parts[1] {
                "+" => a + b,
                "-" => a - b,
                "*" => a * b,
                _ => return None,
            };
            if got != expected {
                return None;
            }
            if let Some(prev) = last {
                if prev != a {
                    return None;
                }
            }
            last = Some(got);
        }
    }
    None
}

/// Mentions of each fact before the stream repeats it only via epoch
/// wraparound. Several mentions in distinct, shuffled contexts force the
/// key to be the only stable predictor of the code, so memorization binds
/// key→code instead of window-wholesale.
const MENTIONS_PER_FACT: usize = 8;
/// Facts minted per scheduling round; their mentions interleave.
const FACTS_PER_BATCH: usize = 16;

struct MemoryGen {
    rng: ChaCha8Rng,
    next_id: u64,
    /// Every `probe_period`-th fact is a probe: its train mentions are all
    /// statements and its QA document is withheld for validation.
    probe_period: u64,
    /// Pending (doc, probe QA+pair) mentions of the current fact batch.
    queue: std::collections::VecDeque<(String, Option<(String, (String, String))>)>,
}

impl MemoryGen {
    fn new(seed: u64, split: (u32, u32)) -> Self {
        let (train_share, val_share) = split;
        // Choose the probe period so withheld QA docs are roughly the
        // validation share of all emitted documents.
        let period = (train_share as f64
            / (val_share.max(1) as f64 * MENTIONS_PER_FACT as f64))
            .ceil() as u64;
        MemoryGen {
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_id: 0,
            probe_period: period.max(2),
            queue: std::collections::VecDeque::new(),
        }
    }

    /// Mint a batch of facts and schedule their mentions round-robin in
    /// shuffled order, so each fact recurs amid different neighbors.
    /// Codes are 24 random digits: long enough that the corpus's total
    /// digit content stresses small parameter budgets.
    fn refill(&mut self) {
        let mut facts = Vec::with_capacity(FACTS_PER_BATCH);
        for _ in 0..FACTS_PER_BATCH {
            let id = self.next_id;
            self.next_id += 1;
            let key = format!("item-{id:06}");
            let code: String = (0..24)
                .map(|_| char::from(b'0' + self.rng.gen_range(0..10)))
                .collect();
            let probe = id % self.probe_period == self.probe_period - 1;
            facts.push((key, code, probe));
        }
        for round in 0..MENTIONS_PER_FACT {
            let mut order: Vec<usize> = (0..facts.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, self.rng.gen_range(0..=i));
            }
            for &f in &order {
                let (key, code, probe) = &facts[f];
                let statement = format!("The code for {key} is {code}.");
                let question = format!("What is the code for {key}?");
                let qa = format!("Q: {question}\nA: {code}");
                // Probe facts: statements only in train; their QA doc is
                // attached once (final round) for the validation stream.
                let doc = if *probe || self.rng.gen_bool(0.5) {
                    statement
                } else {
                    qa.clone()
                };
                let held = (*probe && round == MENTIONS_PER_FACT - 1)
                    .then(|| (qa.clone(), (question, code.clone())));
                self.queue.push_back((doc, held));
            }
        }
    }

    /// Next train document, plus the withheld QA doc and eval pair when
    /// this mention completes a probe fact.
    fn next_doc(&mut self) -> (String, Option<(String, (String, String))>) {
        if self.queue.is_empty() {
            self.refill();
        }
        self.queue.pop_front().expect("refill pushed mentions")
    }
}

struct ChainGen {
    rng: ChaCha8Rng,
}

impl ChainGen {
    fn new(seed: u64) -> Self {
        ChainGen {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// One worked problem document plus its (question, answer) pair.
    fn next_problem(&mut self) -> (String, (String, String)) {
        let start: i64 = self.rng.gen_range(2..50);
        let n_steps = self.rng.gen_range(2..=4);
        let mut question = format!("Q: Start with {start}.");
        let mut steps = Vec::new();
        let mut acc = start;
        for _ in 0..n_steps {
            let op = self.rng.gen_range(0..3);
            let (phrase, next) = match op {
                0 => {
                    let b = self.rng.gen_range(2..30);
                    steps.push(format!("{acc} + {b} = {}", acc + b));
                    (format!(" Add {b}."), acc + b)
                }
                1 => {
                    let b = self.rng.gen_range(2..30);
                    steps.push(format!("{acc} - {b} = {}", acc - b));
                    (format!(" Subtract {b}."), acc - b)
                }
                _ => {
                    let b = self.rng.gen_range(2..6);
                    steps.push(format!("{acc} * {b} = {}", acc * b));
                    (format!(" Multiply by {b}."), acc * b)
                }
            };
            question.push_str(&phrase);
            acc = next;
        }
        question.push_str(" What is the result?");
        let solution = format!("{}.\n#### {acc}", steps.join(". "));
        let doc = format!("{question}\nA: {solution}");
        // Every emitted answer must re-verify under the independent
        // evaluator before it enters the corpus.
        assert_eq!(
            verify_chain_answer(&solution),
            Some(acc),
            "generator emitted an unverifiable solution: {solution}"
        );
        (doc, (question.clone(), acc.to_string()))
    }
}

/// Generate a corpus to the spec's token budget. Memory-recall validation
/// documents are QA probes over facts whose statements live (repeatedly)
/// in the train stream; chain-arithmetic validation documents are every
/// `(train+val)/val`-th problem. Streams stay disjoint while validation
/// measures recall of trained content.
pub fn make_corpus(spec: &CorpusSpec) -> Corpus {
    let (train_share, val_share) = spec.split;
    let period = ((train_share + val_share) / val_share.max(1)) as u64;
    let mut train_docs = Vec::new();
    let mut val_docs = Vec::new();
    let mut eval_items = Vec::new();
    let mut tokens: u64 = 0;

    let mut mem = MemoryGen::new(spec.seed, spec.split);
    let mut chain = ChainGen::new(spec.seed.wrapping_add(1));
    let mut doc_index: u64 = 0;
    let push = |docs: &mut Vec<String>, doc: String, tokens: &mut u64| {
        *tokens += doc.len() as u64 + 1; // +1 for the EOS separator
        docs.push(doc);
    };

    while tokens < spec.token_count {
        let use_memory = match spec.kind {
            GeneratorKind::MemoryRecall => true,
            GeneratorKind::ChainArithmetic => false,
            GeneratorKind::Mixture => doc_index % 2 == 0,
        };
        if use_memory {
            let (doc, held) = mem.next_doc();
            push(&mut train_docs, doc, &mut tokens);
            if let Some((qa, pair)) = held {
                push(&mut val_docs, qa, &mut tokens);
                eval_items.push(pair);
            }
        } else {
            let (doc, pair) = chain.next_problem();
            if doc_index % period == period - 1 {
                push(&mut val_docs, doc, &mut tokens);
                eval_items.push(pair);
            } else {
                push(&mut train_docs, doc, &mut tokens);
            }
        }
        doc_index += 1;
    }

    Corpus {
        train_docs,
        val_docs,
        eval_items,
    }
}
