//! End-to-end checks of the `moelab` binary: exit codes, artifact layout,
//! and the plan → train → eval → probe-eig → analyze pipeline on a tiny
//! model.

use std::path::Path;
use std::process::{Command, Output};

use moelab::cli::config::parse_config_text;

fn moelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moelab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("out");
    let text = format!(
        "\
[run]
id = smoke
seed = 7
out = {}

[model]
d_model = 16
n_layers = 1
n_heads = 2
n_experts = 2
top_k = 1
max_seq_len = 64

[schedule]
peak_lr = 1e-3
warmup_steps = 4

[corpus]
kind = memory-recall
token_count = 20000

[train]
seq_len = 32
batch_seqs = 2
token_budget = 2048
record_every = 8
val_seqs = 2
",
        out.display()
    );
    let path = dir.join("smoke.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_config_is_a_config_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.cfg");
    let out = moelab(&["train", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    // Nothing was created next to the config.
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "[model]\nd_model = 16\nwidth = 3\n").unwrap();
    let out = moelab(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.width"), "stderr: {err}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = moelab(&["train", "--confg", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = moelab(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_train_eval_probe_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    let run_dir = dir.path().join("out").join("smoke");

    let out = moelab(&["train", "--config", cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("resolved.cfg").exists());
    assert!(run_dir.join("records.jsonl").exists());
    assert!(run_dir.join("checkpoint.bin").exists());

    // The resolved config re-parses to a fixed point.
    let resolved = std::fs::read_to_string(run_dir.join("resolved.cfg")).unwrap();
    let parsed = parse_config_text(&resolved).unwrap();
    assert_eq!(parsed.render(), resolved);
    assert_eq!(parsed.run_id, "smoke");

    // Records carry the corpus task metrics on the final line.
    let records = std::fs::read_to_string(run_dir.join("records.jsonl")).unwrap();
    let last = records.lines().last().unwrap();
    assert!(last.contains("\"memory\""), "final record: {last}");

    // Task-loss eval over a small task file.
    let task_path = dir.path().join("probe.jsonl");
    std::fs::write(
        &task_path,
        concat!(
            "{\"question\":\"What is the code for item-000000?\",\"answer\":\"123456\"}\n",
            "{\"question\":\"What is the code for item-000001?\",\"answer\":\"654321\"}\n",
        ),
    )
    .unwrap();
    let ckpt = run_dir.join("checkpoint.bin");
    let out = moelab(&[
        "eval",
        "--config",
        cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--task",
        task_path.to_str().unwrap(),
        "--mode",
        "taskloss",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let eval_lines = std::fs::read_to_string(run_dir.join("eval.jsonl")).unwrap();
    assert!(eval_lines.contains("\"task\":\"probe\""));
    assert!(eval_lines.contains("\"mode\":\"taskloss\""));

    // Curvature probe emits one row per dense layer.
    let out = moelab(&[
        "probe-eig",
        "--config",
        cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--tokens",
        "256",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let eigs = std::fs::read_to_string(run_dir.join("eigs.jsonl")).unwrap();
    // 1 layer: wq wk wv wo + router + 2 experts x 3 matrices, + lm head.
    assert_eq!(eigs.lines().count(), 4 + 1 + 6 + 1);
    assert!(eigs.contains("\"lambda_max\""));

    // Analysis over the output root (per-run subdirectories) produces the
    // curve exports; eval.jsonl and eigs.jsonl in run dirs are ignored.
    let analysis_dir = dir.path().join("analysis");
    let out = moelab(&[
        "analyze",
        "--runs",
        dir.path().join("out").to_str().unwrap(),
        "--out",
        analysis_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(analysis_dir.join("curves.csv").exists());
    assert!(analysis_dir.join("curves.json").exists());
}

#[test]
fn plan_and_sweep_train() {
    let dir = tempfile::tempdir().unwrap();
    let grid_path = dir.path().join("grid.cfg");
    std::fs::write(
        &grid_path,
        "\
[grid]
d_model = 16
n_layers = 1
n_heads = 2
n_experts = 2, 4
top_k = 1
max_seq_len = 64
",
    )
    .unwrap();

    // Target the E=2 entry's per-token compute; a generous tolerance also
    // admits E=4 (only the router differs).
    let out = moelab(&[
        "plan",
        "--flops-per-token",
        "16000",
        "--tolerance",
        "0.5",
        "--grid",
        grid_path.to_str().unwrap(),
        "--budget",
        "4.0e7",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep_path = dir.path().join("sweep.json");
    let sweep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&sweep_path).unwrap()).unwrap();
    let entries = sweep["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);

    let base_cfg = write_config(dir.path());
    let out = moelab(&[
        "train",
        "--config",
        base_cfg.to_str().unwrap(),
        "--sweep",
        sweep_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out_root = dir.path().join("out");
    for e in [2, 4] {
        let run_dir = out_root.join(format!("smoke-d16L1E{e}k1g1"));
        assert!(run_dir.join("records.jsonl").exists(), "missing {}", run_dir.display());
        assert!(run_dir.join("checkpoint.bin").exists());
    }
}
