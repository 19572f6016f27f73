//! Command-line entry point: plan → train → eval → probe-eig → analyze,
//! driven by sectioned key-value config files.
//!
//! Exit codes: 0 success, 2 usage error, 3 config/validation error,
//! 4 runtime error.

pub mod config;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::analysis::{self, CurveSet, RunRecord, Series};
use crate::budget;
use crate::curvature::{self, ProbeConfig};
use crate::evalsuite::{
    evaluate, load_task_file, mc_accuracy, EvalMode, EvalResult, SCConfig, TaskKind, TaskSpec,
};
use crate::model::MoeModel;
use crate::trainer::{
    load_checkpoint, make_corpus, resume_run, save_checkpoint, train_run, Corpus, TrainOutcome,
};

use config::{parse_config, parse_grid, split_seed, ConfigError, ExperimentConfig};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(
    crate::trainer::TrainError,
    crate::model::ModelError,
    crate::evalsuite::EvalError,
    crate::curvature::CurvatureError,
    crate::analysis::AnalysisError,
    std::io::Error,
    serde_json::Error
);

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "moelab", version, about = "MoE scaling experiment laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Filter a config grid to an iso-FLOP sweep and assign token budgets.
    Plan {
        /// Target forward FLOPs per token.
        #[arg(long)]
        flops_per_token: f64,
        /// Relative tolerance around the target.
        #[arg(long, default_value_t = 0.01)]
        tolerance: f64,
        /// Grid file ([grid] section, comma-separated value lists).
        #[arg(long)]
        grid: PathBuf,
        /// Total FLOP budget each entry's token count must spend.
        #[arg(long)]
        budget: f64,
        /// Output directory (default $MOELAB_OUT or ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run, or every entry of a planned sweep.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from this checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Sweep file from `plan`; trains each entry with the config as base.
        #[arg(long)]
        sweep: Option<PathBuf>,
        /// Run up to N sweep entries concurrently as child processes.
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Score tasks against a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task files (JSON lines); defaults to the config's task list.
        #[arg(long)]
        task: Vec<PathBuf>,
        /// taskloss | pass1 | mc
        #[arg(long, default_value = "taskloss")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        shots: usize,
        #[arg(long, default_value_t = 256)]
        max_new_tokens: usize,
    },
    /// Self-consistency decoding evaluation.
    ScEval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Vec<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        temp: Option<f64>,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
    },
    /// Per-layer K-FAC Fisher maximum eigenvalues for a checkpoint.
    ProbeEig {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Probe tokens drawn from the validation stream.
        #[arg(long, default_value_t = 4096)]
        tokens: usize,
        /// Leave router matrices out of the report.
        #[arg(long)]
        exclude_router: bool,
    },
    /// Aggregate run records into density and TPP curves.
    Analyze {
        /// Directory of *.jsonl run records.
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Metric: the pseudo-task `val_ce`, or a task name from records.
        #[arg(long, default_value = "val_ce")]
        task: String,
        /// Read the task's accuracy instead of its loss.
        #[arg(long)]
        accuracy: bool,
    },
}

pub fn run_cli() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Plan {
            flops_per_token,
            tolerance,
            grid,
            budget,
            out,
        } => cmd_plan(flops_per_token, tolerance, &grid, budget, out),
        Cmd::Train {
            config,
            resume,
            sweep,
            parallel,
        } => match sweep {
            Some(sweep) => cmd_train_sweep(&config, &sweep, parallel),
            None => cmd_train(&parse_config(&config)?, resume.as_deref()).map(|_| ()),
        },
        Cmd::Eval {
            config,
            checkpoint,
            task,
            mode,
            shots,
            max_new_tokens,
        } => cmd_eval(&config, &checkpoint, &task, &mode, shots, max_new_tokens),
        Cmd::ScEval {
            config,
            checkpoint,
            task,
            samples,
            temp,
            top_p,
            shots,
            max_new_tokens,
        } => {
            let cfg = parse_config(&config)?;
            let sc = SCConfig {
                n_samples: samples.unwrap_or(cfg.sc.n_samples),
                temperature: temp.unwrap_or(cfg.sc.temperature),
                top_p: top_p.unwrap_or(cfg.sc.top_p),
                max_new_tokens: max_new_tokens.unwrap_or(cfg.sc.max_new_tokens),
            };
            sc.validate().map_err(CliError::from)?;
            run_eval(&cfg, &checkpoint, &task, EvalKind::Sc(sc), shots.unwrap_or(0))
        }
        Cmd::ProbeEig {
            config,
            checkpoint,
            tokens,
            exclude_router,
        } => cmd_probe_eig(&config, &checkpoint, tokens, exclude_router),
        Cmd::Analyze {
            runs,
            out,
            task,
            accuracy,
        } => cmd_analyze(&runs, out, &task, accuracy),
    }
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn cmd_plan(
    target: f64,
    tolerance: f64,
    grid_path: &Path,
    budget: f64,
    out: Option<PathBuf>,
) -> Result<()> {
    let grid = parse_grid(grid_path)?;
    if !(target > 0.0) || !(budget > 0.0) {
        return Err(ConfigError::Invalid("flops-per-token and budget must be positive".into())
            .into());
    }
    let plan = budget::plan_isoflop(target, &grid, tolerance, budget);
    let out = out.unwrap_or_else(config::default_out_root);
    std::fs::create_dir_all(&out)?;
    let path = out.join("sweep.json");
    write_atomic(&path, serde_json::to_string_pretty(&plan)?.as_bytes())?;
    println!(
        "planned {} of {} grid configs -> {}",
        plan.entries.len(),
        grid.len(),
        path.display()
    );
    for e in &plan.entries {
        let c = &e.config;
        println!(
            "  d={} L={} E={} k={} g={} flops/token={} tokens={}",
            c.d_model, c.n_layers, c.n_experts, c.top_k, c.granularity, e.flops_per_token, e.tokens
        );
    }
    Ok(())
}

/// Train one config; returns the run directory.
fn cmd_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let run_dir = cfg.out_dir.join(&cfg.run_id);
    std::fs::create_dir_all(&run_dir)?;
    write_atomic(&run_dir.join("resolved.cfg"), cfg.render().as_bytes())?;

    let corpus = make_corpus(&cfg.corpus);
    let params = cfg.train_params();
    let mut sink = |_: &RunRecord| {};
    let outcome: TrainOutcome = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            resume_run(&params, &corpus, ckpt, &mut sink)?
        }
        None => train_run(&params, &corpus, &mut sink)?,
    };

    let mut records = outcome.records;
    if let Some(last) = records.last_mut() {
        last.tasks = Some(corpus_task_metrics(&outcome.model, &corpus, 64)?);
    }
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    write_atomic(&run_dir.join("records.jsonl"), lines.as_bytes())?;
    save_checkpoint(
        &run_dir.join("checkpoint.bin"),
        &outcome.model,
        &outcome.optim,
        outcome.step,
        outcome.data_cursor,
        outcome.tokens_seen,
    )?;
    if let Some(r) = records.last() {
        println!(
            "run {} done: step {} tokens {} train_ce {:.4} val_ce {:.4} -> {}",
            cfg.run_id,
            r.step,
            r.tokens_seen,
            r.train_ce,
            r.val_ce,
            run_dir.display()
        );
    }
    Ok(run_dir)
}

/// Train every entry of a planned sweep, sequentially by default or as up
/// to `parallel` child processes with disjoint output directories.
fn cmd_train_sweep(base_path: &Path, sweep_path: &Path, parallel: Option<usize>) -> Result<()> {
    let base = parse_config(base_path)?;
    let text = std::fs::read_to_string(sweep_path)?;
    let plan: budget::SweepPlan = serde_json::from_str(&text)?;
    if plan.entries.is_empty() {
        return Err(CliError::Runtime("sweep has no entries".into()));
    }

    let cfg_dir = base.out_dir.join("sweep-configs");
    std::fs::create_dir_all(&cfg_dir)?;
    let mut derived_paths = Vec::new();
    for entry in &plan.entries {
        let c = &entry.config;
        let mut derived = base.clone();
        derived.run_id = format!(
            "{}-d{}L{}E{}k{}g{}",
            base.run_id, c.d_model, c.n_layers, c.n_experts, c.top_k, c.granularity
        );
        derived.model = c.clone();
        derived.train.token_budget = entry.tokens;
        derived.schedule.total_steps = (entry.tokens
            / (derived.train.batch_seqs * derived.train.seq_len).max(1) as u64)
            .max(1);
        derived.validate()?;
        let path = cfg_dir.join(format!("{}.cfg", derived.run_id));
        write_atomic(&path, derived.render().as_bytes())?;
        derived_paths.push((derived, path));
    }

    match parallel {
        None | Some(0) | Some(1) => {
            for (derived, _) in &derived_paths {
                cmd_train(derived, None)?;
            }
        }
        Some(n) => {
            let exe = std::env::current_exe()?;
            let mut pending = derived_paths.iter();
            let mut running: Vec<(String, std::process::Child)> = Vec::new();
            loop {
                while running.len() < n {
                    match pending.next() {
                        Some((derived, path)) => {
                            let child = std::process::Command::new(&exe)
                                .arg("train")
                                .arg("--config")
                                .arg(path)
                                .spawn()?;
                            running.push((derived.run_id.clone(), child));
                        }
                        None => break,
                    }
                }
                if running.is_empty() {
                    break;
                }
                let (run_id, mut child) = running.remove(0);
                let status = child.wait()?;
                if !status.success() {
                    return Err(CliError::Runtime(format!(
                        "sweep run {run_id} failed with {status}"
                    )));
                }
            }
        }
    }
    println!("sweep complete: {} runs", derived_paths.len());
    Ok(())
}

/// Task metrics on the corpus's own QA probes: answer-token loss and
/// teacher-forced exact-match accuracy, keyed by item family.
fn corpus_task_metrics(
    model: &MoeModel,
    corpus: &Corpus,
    max_per_kind: usize,
) -> Result<BTreeMap<String, (f64, f64)>> {
    let mut sums: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for (question, answer) in &corpus.eval_items {
        // Chain questions already carry the "Q: " prefix; memory probes
        // store the bare question.
        let (name, prompt) = if question.starts_with("Q: ") {
            ("chain", format!("{question}\nA:"))
        } else {
            ("memory", format!("Q: {question}\nA:"))
        };
        let entry = sums.entry(name.to_string()).or_insert((0.0, 0.0, 0));
        if entry.2 >= max_per_kind {
            continue;
        }
        let (loss, exact) = answer_loss_and_match(model, &prompt, &format!(" {answer}"))?;
        entry.0 += loss;
        entry.1 += if exact { 1.0 } else { 0.0 };
        entry.2 += 1;
    }
    Ok(sums
        .into_iter()
        .filter(|(_, (_, _, n))| *n > 0)
        .map(|(name, (loss, hits, n))| (name, (loss / n as f64, hits / n as f64)))
        .collect())
}

/// Per-token answer loss plus whether the answer is the argmax at every
/// answer position (teacher forced).
fn answer_loss_and_match(model: &MoeModel, prompt: &str, answer: &str) -> Result<(f64, bool)> {
    use crate::trainer::tokenizer::encode;
    let prompt_tokens = encode(prompt);
    let answer_tokens = encode(answer);
    let mut stream = prompt_tokens.clone();
    stream.extend(&answer_tokens);
    let needed = (stream.len() - 1).min(model.config.max_seq_len);
    let logits = model.logits(&stream[..needed])?;
    let vocab = logits.ncols();
    let mut loss = 0.0;
    let mut scored = 0usize;
    let mut exact = true;
    for (offset, &target) in answer_tokens.iter().enumerate() {
        let p = prompt_tokens.len() + offset - 1;
        if p >= needed {
            break;
        }
        let row = &logits.data()[p * vocab..(p + 1) * vocab];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[target as usize];
        scored += 1;
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        if argmax != target as usize {
            exact = false;
        }
    }
    if scored == 0 {
        return Err(CliError::Runtime(format!(
            "probe prompt fills the whole context ({} tokens); nothing to score",
            model.config.max_seq_len
        )));
    }
    Ok((loss / scored as f64, exact))
}

enum EvalKind {
    Mode(EvalMode),
    Mc,
    Sc(SCConfig),
}

fn cmd_eval(
    config: &Path,
    checkpoint: &Path,
    tasks: &[PathBuf],
    mode: &str,
    shots: usize,
    max_new_tokens: usize,
) -> Result<()> {
    let cfg = parse_config(config)?;
    let kind = match mode {
        "taskloss" => EvalKind::Mode(EvalMode::TaskLoss),
        "pass1" => EvalKind::Mode(EvalMode::Pass1 { max_new_tokens }),
        "mc" => EvalKind::Mc,
        other => {
            return Err(ConfigError::Invalid(format!(
                "mode must be taskloss, pass1, or mc, got `{other}`"
            ))
            .into())
        }
    };
    run_eval(&cfg, checkpoint, tasks, kind, shots)
}

fn run_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    tasks: &[PathBuf],
    kind: EvalKind,
    shots: usize,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    ckpt.validate_against(&cfg.model)?;
    let model = ckpt.model;

    let task_paths: Vec<PathBuf> = if tasks.is_empty() {
        cfg.tasks.clone()
    } else {
        tasks.to_vec()
    };
    if task_paths.is_empty() {
        return Err(ConfigError::Invalid(
            "no tasks: pass --task or list them in [tasks]".into(),
        )
        .into());
    }

    let run_dir = cfg.out_dir.join(&cfg.run_id);
    std::fs::create_dir_all(&run_dir)?;
    let resolved = run_dir.join("resolved.cfg");
    if !resolved.exists() {
        write_atomic(&resolved, cfg.render().as_bytes())?;
    }
    let eval_seed = split_seed(cfg.seed, "eval");

    let mut out = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(run_dir.join("eval.jsonl"))?;
    for path in &task_paths {
        let items = load_task_file(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "task".to_string());
        let task_kind = if !items.is_empty() && items.iter().all(|i| i.choices.is_some()) {
            TaskKind::MultipleChoice
        } else {
            TaskKind::OpenEnded
        };
        let mut task = TaskSpec::new(&name, task_kind, items)?;
        task.shots = shots;

        let result: EvalResult = match &kind {
            EvalKind::Mode(mode) => evaluate(&model, &task, mode, &cfg.run_id, eval_seed)?,
            EvalKind::Mc => mc_accuracy(&model, &task, &cfg.run_id, eval_seed)?,
            EvalKind::Sc(sc) => evaluate(
                &model,
                &task,
                &EvalMode::SelfConsistency(*sc),
                &cfg.run_id,
                eval_seed,
            )?,
        };
        writeln!(out, "{}", serde_json::to_string(&result)?)?;
        let metric = match (result.accuracy, result.task_loss) {
            (Some(acc), _) => format!("accuracy {acc:.4}"),
            (None, Some(loss)) => format!("task_loss {loss:.4}"),
            (None, None) => "no metric".to_string(),
        };
        println!(
            "{} {} ({} items, mode {}): {}",
            cfg.run_id, result.task, result.n_items, result.mode, metric
        );
    }
    Ok(())
}

fn cmd_probe_eig(
    config: &Path,
    checkpoint: &Path,
    tokens: usize,
    exclude_router: bool,
) -> Result<()> {
    let cfg = parse_config(config)?;
    let ckpt = load_checkpoint(checkpoint)?;
    ckpt.validate_against(&cfg.model)?;
    let model = ckpt.model;

    let corpus = make_corpus(&cfg.corpus);
    let stream = corpus.val_tokens();
    let probe = ProbeConfig {
        tokens,
        seq_len: cfg.train.seq_len.min(cfg.model.max_seq_len),
        seed: split_seed(cfg.seed, "probe"),
        include_router: !exclude_router,
    };
    let (table, overall) = curvature::model_max_eig(&model, &stream, &probe, &cfg.run_id)?;

    let run_dir = cfg.out_dir.join(&cfg.run_id);
    std::fs::create_dir_all(&run_dir)?;
    let mut lines = String::new();
    for row in &table {
        lines.push_str(&serde_json::to_string(row)?);
        lines.push('\n');
    }
    write_atomic(&run_dir.join("eigs.jsonl"), lines.as_bytes())?;
    println!(
        "{}: {} layers probed, max lambda {overall:.6e} -> {}",
        cfg.run_id,
        table.len(),
        run_dir.join("eigs.jsonl").display()
    );
    Ok(())
}

fn cmd_analyze(runs: &Path, out: Option<PathBuf>, task: &str, accuracy: bool) -> Result<()> {
    let loaded = analysis::load_runs(runs)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let mut sets: Vec<CurveSet> = Vec::new();
    let (density, notices) = analysis::optimal_density(&loaded.records, task, accuracy);
    for n in &notices {
        eprintln!("notice: {n}");
    }
    for curve in density {
        sets.push(CurveSet {
            group: format!("density:active={}", curve.active_params),
            series: vec![Series {
                label: format!("optimal={}", curve.optimal_density),
                points: curve.points,
            }],
        });
    }
    sets.push(analysis::tpp_curve(&loaded.records, task, accuracy));

    let out = out.unwrap_or_else(|| config::default_out_root().join("analysis"));
    let (csv_path, json_path) = analysis::export_curves(&sets, &out)?;
    println!(
        "analyzed {} records -> {} and {}",
        loaded.records.len(),
        csv_path.display(),
        json_path.display()
    );
    Ok(())
}
