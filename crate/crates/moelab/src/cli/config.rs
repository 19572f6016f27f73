//! Sectioned key-value experiment configs: strict parsing (unknown keys
//! rejected with their path and line), defaults materialized, and a
//! deterministic renderer whose output re-parses to the same config.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::evalsuite::SCConfig;
use crate::model::ModelConfig;
use crate::numerics::Precision;
use crate::trainer::{AdamHyper, CorpusSpec, GeneratorKind, Schedule, TrainParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{path}` (line {line})")]
    UnknownKey { path: String, line: usize },
    #[error("duplicate key `{path}` (line {line})")]
    DuplicateKey { path: String, line: usize },
    #[error("key `{path}` (line {line}): {msg}")]
    BadValue {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("missing required key `{path}`")]
    Missing { path: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

struct Entry {
    key: String,
    value: String,
    line: usize,
    used: std::cell::Cell<bool>,
}

struct SectionData {
    name: String,
    entries: Vec<Entry>,
}

struct RawConfig {
    sections: Vec<SectionData>,
}

/// Section names where a key may repeat (accumulating a list).
const REPEATABLE: &[(&str, &str)] = &[("tasks", "task")];

fn parse_raw(text: &str, allowed_sections: &[&str]) -> Result<RawConfig> {
    let mut sections: Vec<SectionData> = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or(ConfigError::Syntax {
                line,
                msg: "unterminated section header".into(),
            })?;
            if !allowed_sections.contains(&name) {
                return Err(ConfigError::UnknownKey {
                    path: name.to_string(),
                    line,
                });
            }
            if sections.iter().any(|s| s.name == name) {
                return Err(ConfigError::DuplicateKey {
                    path: name.to_string(),
                    line,
                });
            }
            sections.push(SectionData {
                name: name.to_string(),
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax {
            line,
            msg: "expected `key = value` or `[section]`".into(),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        let section = sections.last_mut().ok_or(ConfigError::Syntax {
            line,
            msg: "key before any [section] header".into(),
        })?;
        let repeatable = REPEATABLE.contains(&(section.name.as_str(), key.as_str()));
        if !repeatable && section.entries.iter().any(|e| e.key == key) {
            return Err(ConfigError::DuplicateKey {
                path: format!("{}.{}", section.name, key),
                line,
            });
        }
        section.entries.push(Entry {
            key,
            value,
            line,
            used: std::cell::Cell::new(false),
        });
    }
    Ok(RawConfig { sections })
}

/// Allowed keys per section; checked up front so a typo is reported as an
/// unknown key rather than as whatever required key it shadows.
const EXPERIMENT_SCHEMA: &[(&str, &[&str])] = &[
    ("run", &["id", "seed", "out"]),
    (
        "model",
        &[
            "d_model",
            "n_layers",
            "n_heads",
            "n_experts",
            "top_k",
            "granularity",
            "effective_top_k",
            "ffn_expansion",
            "vocab_size",
            "max_seq_len",
            "rope_base",
            "head_init_std",
            "precision",
        ],
    ),
    (
        "schedule",
        &["peak_lr", "warmup_steps", "total_steps", "floor_fraction"],
    ),
    ("corpus", &["kind", "seed", "token_count", "split"]),
    (
        "train",
        &[
            "alpha",
            "beta",
            "seq_len",
            "batch_seqs",
            "token_budget",
            "record_every",
            "val_seqs",
        ],
    ),
    ("tasks", &["task"]),
    (
        "sc",
        &["samples", "temperature", "top_p", "max_new_tokens"],
    ),
];

const GRID_SCHEMA: &[(&str, &[&str])] = &[(
    "grid",
    &[
        "d_model",
        "n_layers",
        "n_heads",
        "n_experts",
        "top_k",
        "granularity",
        "ffn_expansion",
        "vocab_size",
        "max_seq_len",
        "precision",
    ],
)];

impl RawConfig {
    fn check_schema(&self, schema: &[(&str, &[&str])]) -> Result<()> {
        for s in &self.sections {
            let allowed = schema
                .iter()
                .find(|(name, _)| *name == s.name)
                .map(|(_, keys)| *keys)
                .unwrap_or(&[]);
            for e in &s.entries {
                if !allowed.contains(&e.key.as_str()) {
                    return Err(ConfigError::UnknownKey {
                        path: format!("{}.{}", s.name, e.key),
                        line: e.line,
                    });
                }
            }
        }
        Ok(())
    }

    fn section(&self, name: &str) -> Section<'_> {
        Section {
            name: name.to_string(),
            data: self.sections.iter().find(|s| s.name == name),
        }
    }

    /// Every key must have been consumed by a typed getter.
    fn finish(&self) -> Result<()> {
        for s in &self.sections {
            for e in &s.entries {
                if !e.used.get() {
                    return Err(ConfigError::UnknownKey {
                        path: format!("{}.{}", s.name, e.key),
                        line: e.line,
                    });
                }
            }
        }
        Ok(())
    }
}

struct Section<'a> {
    name: String,
    data: Option<&'a SectionData>,
}

impl<'a> Section<'a> {
    fn raw(&self, key: &str) -> Option<(&'a str, usize)> {
        let e = self.data?.entries.iter().find(|e| e.key == key)?;
        e.used.set(true);
        Some((&e.value, e.line))
    }

    fn all(&self, key: &str) -> Vec<(&'a str, usize)> {
        match self.data {
            None => Vec::new(),
            Some(d) => d
                .entries
                .iter()
                .filter(|e| e.key == key)
                .map(|e| {
                    e.used.set(true);
                    (e.value.as_str(), e.line)
                })
                .collect(),
        }
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => parse_value(v).map(Some).map_err(|msg| {
                ConfigError::BadValue {
                    path: format!("{}.{}", self.name, key),
                    line,
                    msg,
                }
            }),
        }
    }

    fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn req<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or(ConfigError::Missing {
            path: format!("{}.{}", self.name, key),
        })
    }
}

fn parse_value<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    // Underscore digit grouping is allowed in numeric values.
    let cleaned: String = v.chars().filter(|&c| c != '_').collect();
    cleaned
        .parse()
        .map_err(|_| format!("cannot parse `{v}` as {}", std::any::type_name::<T>()))
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(format!("precision must be f32 or f64, got `{other}`")),
    }
}

fn render_precision(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

fn parse_kind(s: &str) -> std::result::Result<GeneratorKind, String> {
    match s {
        "memory-recall" => Ok(GeneratorKind::MemoryRecall),
        "chain-arithmetic" => Ok(GeneratorKind::ChainArithmetic),
        "mixture" => Ok(GeneratorKind::Mixture),
        other => Err(format!(
            "corpus kind must be memory-recall, chain-arithmetic, or mixture, got `{other}`"
        )),
    }
}

fn render_kind(k: GeneratorKind) -> &'static str {
    match k {
        GeneratorKind::MemoryRecall => "memory-recall",
        GeneratorKind::ChainArithmetic => "chain-arithmetic",
        GeneratorKind::Mixture => "mixture",
    }
}

/// Derive a component seed from the global seed: FNV-1a of the domain
/// label, XORed with the global seed. Stable and documented so any
/// component can be reproduced in isolation.
pub fn split_seed(global: u64, domain: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in domain.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h ^ global
}

/// Training-loop knobs outside the model/schedule/corpus blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub alpha: f64,
    pub beta: f64,
    pub seq_len: usize,
    pub batch_seqs: usize,
    pub token_budget: u64,
    pub record_every: u64,
    pub val_seqs: usize,
}

/// Fully resolved experiment description; every field has a concrete
/// value once parsing succeeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub corpus: CorpusSpec,
    pub train: TrainSettings,
    pub tasks: Vec<PathBuf>,
    pub sc: SCConfig,
}

const EXPERIMENT_SECTIONS: &[&str] =
    &["run", "model", "schedule", "corpus", "train", "tasks", "sc"];

/// Default output root: `$MOELAB_OUT` if set, else `runs`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os("MOELAB_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_config_text(&text)
}

pub fn parse_config_text(text: &str) -> Result<ExperimentConfig> {
    let raw = parse_raw(text, EXPERIMENT_SECTIONS)?;
    raw.check_schema(EXPERIMENT_SCHEMA)?;

    let run = raw.section("run");
    let run_id: String = run.or("id", "run".to_string())?;
    let seed: u64 = run.or("seed", 0)?;
    let out_dir: PathBuf = run
        .raw("out")
        .map(|(v, _)| PathBuf::from(v))
        .unwrap_or_else(default_out_root);

    let model = parse_model_section(&raw.section("model"))?;

    let train_s = raw.section("train");
    let seq_len: usize = train_s.or("seq_len", 128)?;
    let batch_seqs: usize = train_s.or("batch_seqs", 4)?;
    let token_budget: u64 = train_s.req("token_budget")?;
    let train = TrainSettings {
        alpha: train_s.or("alpha", 1e-2)?,
        beta: train_s.or("beta", 1e-3)?,
        seq_len,
        batch_seqs,
        token_budget,
        record_every: train_s.or("record_every", 50)?,
        val_seqs: train_s.or("val_seqs", 8)?,
    };

    let derived_steps = (token_budget / (batch_seqs * seq_len).max(1) as u64).max(1);
    let sched = raw.section("schedule");
    let schedule = Schedule {
        peak_lr: sched.or("peak_lr", 4e-4)?,
        warmup_steps: sched.or("warmup_steps", 2000)?,
        total_steps: sched.or("total_steps", derived_steps)?,
        floor_fraction: sched.or("floor_fraction", 0.1)?,
    };

    let corp = raw.section("corpus");
    let kind = match corp.raw("kind") {
        None => GeneratorKind::Mixture,
        Some((v, line)) => parse_kind(v).map_err(|msg| ConfigError::BadValue {
            path: "corpus.kind".into(),
            line,
            msg,
        })?,
    };
    let split = match corp.raw("split") {
        None => (99, 1),
        Some((v, line)) => parse_split(v).map_err(|msg| ConfigError::BadValue {
            path: "corpus.split".into(),
            line,
            msg,
        })?,
    };
    let corpus = CorpusSpec {
        kind,
        seed: corp.or("seed", split_seed(seed, "corpus"))?,
        token_count: corp.or("token_count", token_budget)?,
        split,
    };

    let tasks: Vec<PathBuf> = raw
        .section("tasks")
        .all("task")
        .into_iter()
        .map(|(v, _)| PathBuf::from(v))
        .collect();

    let sc_s = raw.section("sc");
    let sc_default = SCConfig::default();
    let sc = SCConfig {
        n_samples: sc_s.or("samples", sc_default.n_samples)?,
        temperature: sc_s.or("temperature", sc_default.temperature)?,
        top_p: sc_s.or("top_p", sc_default.top_p)?,
        max_new_tokens: sc_s.or("max_new_tokens", sc_default.max_new_tokens)?,
    };

    raw.finish()?;

    let config = ExperimentConfig {
        run_id,
        seed,
        out_dir,
        model,
        schedule,
        corpus,
        train,
        tasks,
        sc,
    };
    config.validate()?;
    Ok(config)
}

fn parse_split(v: &str) -> std::result::Result<(u32, u32), String> {
    let (a, b) = v
        .split_once(':')
        .ok_or_else(|| format!("split must be `train:val`, got `{v}`"))?;
    let a = a.trim().parse().map_err(|_| format!("bad train share `{a}`"))?;
    let b = b.trim().parse().map_err(|_| format!("bad val share `{b}`"))?;
    if b == 0 {
        return Err("validation share must be positive".into());
    }
    Ok((a, b))
}

fn parse_model_section(m: &Section<'_>) -> Result<ModelConfig> {
    let precision = match m.raw("precision") {
        None => Precision::F32,
        Some((v, line)) => parse_precision(v).map_err(|msg| ConfigError::BadValue {
            path: format!("{}.precision", m.name),
            line,
            msg,
        })?,
    };
    Ok(ModelConfig {
        d_model: m.req("d_model")?,
        n_layers: m.req("n_layers")?,
        n_heads: m.req("n_heads")?,
        n_experts: m.req("n_experts")?,
        top_k: m.req("top_k")?,
        granularity: m.or("granularity", 1)?,
        effective_top_k: m.get("effective_top_k")?,
        ffn_expansion: m.or("ffn_expansion", 2)?,
        vocab_size: m.or("vocab_size", crate::trainer::tokenizer::VOCAB_SIZE)?,
        max_seq_len: m.or("max_seq_len", 256)?,
        rope_base: m.or("rope_base", 10000.0)?,
        head_init_std: m.or("head_init_std", 0.02)?,
        precision,
    })
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.seq_len == 0 || self.train.seq_len > self.model.max_seq_len {
            return Err(ConfigError::Invalid(format!(
                "train.seq_len {} must be in [1, model.max_seq_len = {}]",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        if self.train.batch_seqs == 0 {
            return Err(ConfigError::Invalid("train.batch_seqs must be positive".into()));
        }
        if self.train.token_budget < (self.train.batch_seqs * self.train.seq_len) as u64 {
            return Err(ConfigError::Invalid(
                "train.token_budget smaller than one batch".into(),
            ));
        }
        if self.train.record_every == 0 {
            return Err(ConfigError::Invalid("train.record_every must be positive".into()));
        }
        self.sc
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.schedule.peak_lr > 0.0) {
            return Err(ConfigError::Invalid("schedule.peak_lr must be positive".into()));
        }
        Ok(())
    }

    /// Trainer parameters for this experiment; the train-loop seed is
    /// split from the global seed.
    pub fn train_params(&self) -> TrainParams {
        TrainParams {
            run_id: self.run_id.clone(),
            config: self.model.clone(),
            schedule: self.schedule.clone(),
            hyper: AdamHyper::default(),
            alpha: self.train.alpha,
            beta: self.train.beta,
            seed: split_seed(self.seed, "train"),
            seq_len: self.train.seq_len,
            batch_seqs: self.train.batch_seqs,
            token_budget: self.train.token_budget,
            record_every: self.train.record_every,
            val_seqs: self.train.val_seqs,
            hold_batch: false,
        }
    }

    /// Deterministic text form with every default materialized; parsing
    /// the output reproduces this config exactly.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        s.push_str("[run]\n");
        s.push_str(&format!("id = {}\n", self.run_id));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("out = {}\n", self.out_dir.display()));
        s.push_str("\n[model]\n");
        s.push_str(&format!("d_model = {}\n", m.d_model));
        s.push_str(&format!("n_layers = {}\n", m.n_layers));
        s.push_str(&format!("n_heads = {}\n", m.n_heads));
        s.push_str(&format!("n_experts = {}\n", m.n_experts));
        s.push_str(&format!("top_k = {}\n", m.top_k));
        s.push_str(&format!("granularity = {}\n", m.granularity));
        if let Some(k) = m.effective_top_k {
            s.push_str(&format!("effective_top_k = {k}\n"));
        }
        s.push_str(&format!("ffn_expansion = {}\n", m.ffn_expansion));
        s.push_str(&format!("vocab_size = {}\n", m.vocab_size));
        s.push_str(&format!("max_seq_len = {}\n", m.max_seq_len));
        s.push_str(&format!("rope_base = {}\n", m.rope_base));
        s.push_str(&format!("head_init_std = {}\n", m.head_init_std));
        s.push_str(&format!("precision = {}\n", render_precision(m.precision)));
        s.push_str("\n[schedule]\n");
        s.push_str(&format!("peak_lr = {}\n", self.schedule.peak_lr));
        s.push_str(&format!("warmup_steps = {}\n", self.schedule.warmup_steps));
        s.push_str(&format!("total_steps = {}\n", self.schedule.total_steps));
        s.push_str(&format!("floor_fraction = {}\n", self.schedule.floor_fraction));
        s.push_str("\n[corpus]\n");
        s.push_str(&format!("kind = {}\n", render_kind(self.corpus.kind)));
        s.push_str(&format!("seed = {}\n", self.corpus.seed));
        s.push_str(&format!("token_count = {}\n", self.corpus.token_count));
        s.push_str(&format!("split = {}:{}\n", self.corpus.split.0, self.corpus.split.1));
        s.push_str("\n[train]\n");
        let t = &self.train;
        s.push_str(&format!("alpha = {}\n", t.alpha));
        s.push_str(&format!("beta = {}\n", t.beta));
        s.push_str(&format!("seq_len = {}\n", t.seq_len));
        s.push_str(&format!("batch_seqs = {}\n", t.batch_seqs));
        s.push_str(&format!("token_budget = {}\n", t.token_budget));
        s.push_str(&format!("record_every = {}\n", t.record_every));
        s.push_str(&format!("val_seqs = {}\n", t.val_seqs));
        if !self.tasks.is_empty() {
            s.push_str("\n[tasks]\n");
            for task in &self.tasks {
                s.push_str(&format!("task = {}\n", task.display()));
            }
        }
        s.push_str("\n[sc]\n");
        s.push_str(&format!("samples = {}\n", self.sc.n_samples));
        s.push_str(&format!("temperature = {}\n", self.sc.temperature));
        s.push_str(&format!("top_p = {}\n", self.sc.top_p));
        s.push_str(&format!("max_new_tokens = {}\n", self.sc.max_new_tokens));
        s
    }
}

/// Parse a `[grid]` file: each model key takes a comma-separated value
/// list; the grid is the Cartesian product.
pub fn parse_grid(path: &Path) -> Result<Vec<ModelConfig>> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_grid_text(&text)
}

pub fn parse_grid_text(text: &str) -> Result<Vec<ModelConfig>> {
    let raw = parse_raw(text, &["grid"])?;
    raw.check_schema(GRID_SCHEMA)?;
    let g = raw.section("grid");

    fn list<T: std::str::FromStr + Copy>(
        g: &Section<'_>,
        key: &str,
        default: Option<T>,
    ) -> Result<Vec<T>> {
        match g.raw(key) {
            None => match default {
                Some(d) => Ok(vec![d]),
                None => Err(ConfigError::Missing {
                    path: format!("grid.{key}"),
                }),
            },
            Some((v, line)) => v
                .split(',')
                .map(|part| {
                    parse_value(part.trim()).map_err(|msg| ConfigError::BadValue {
                        path: format!("grid.{key}"),
                        line,
                        msg,
                    })
                })
                .collect(),
        }
    }

    let d_models: Vec<usize> = list(&g, "d_model", None)?;
    let n_layers: Vec<usize> = list(&g, "n_layers", None)?;
    let n_heads: Vec<usize> = list(&g, "n_heads", None)?;
    let n_experts: Vec<usize> = list(&g, "n_experts", None)?;
    let top_ks: Vec<usize> = list(&g, "top_k", None)?;
    let grans: Vec<usize> = list(&g, "granularity", Some(1))?;
    let ffn: Vec<usize> = list(&g, "ffn_expansion", Some(2))?;
    let vocab: usize = g.or("vocab_size", crate::trainer::tokenizer::VOCAB_SIZE)?;
    let max_seq_len: usize = g.or("max_seq_len", 256)?;
    let precision = match g.raw("precision") {
        None => Precision::F32,
        Some((v, line)) => parse_precision(v).map_err(|msg| ConfigError::BadValue {
            path: "grid.precision".into(),
            line,
            msg,
        })?,
    };
    raw.finish()?;

    let mut out = Vec::new();
    for &d in &d_models {
        for &l in &n_layers {
            for &h in &n_heads {
                for &e in &n_experts {
                    for &k in &top_ks {
                        for &gr in &grans {
                            for &f in &ffn {
                                out.push(ModelConfig {
                                    d_model: d,
                                    n_layers: l,
                                    n_heads: h,
                                    n_experts: e,
                                    top_k: k,
                                    granularity: gr,
                                    effective_top_k: None,
                                    ffn_expansion: f,
                                    vocab_size: vocab,
                                    max_seq_len,
                                    rope_base: 10000.0,
                                    head_init_std: 0.02,
                                    precision,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
