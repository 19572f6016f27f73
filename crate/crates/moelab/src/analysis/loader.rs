use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::curves::{CurvePoint, CurveSet, Regime, Series};
use super::records::RunRecord;
use super::{AnalysisError, Result};
use crate::budget;
use crate::model::ModelConfig;
use crate::numerics::Precision;

/// Parsed records plus the non-fatal diagnostics found along the way.
#[derive(Debug, Default)]
pub struct LoadOutcome {
    pub records: Vec<RunRecord>,
    pub warnings: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnalysisError + '_ {
    move |source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reconstruct the config a record claims to describe, when it carries
/// enough provenance (vocab and head counts) to do so.
fn config_of(record: &RunRecord) -> Option<ModelConfig> {
    Some(ModelConfig {
        d_model: record.d,
        n_layers: record.n_layers,
        n_heads: record.heads?,
        n_experts: record.n_experts,
        top_k: record.top_k,
        granularity: record.granularity,
        effective_top_k: Some(record.top_k),
        ffn_expansion: 2,
        vocab_size: record.vocab?,
        max_seq_len: 1024,
        rope_base: 10000.0,
        head_init_std: 0.02,
        precision: Precision::F32,
    })
}

fn validate_record(record: &RunRecord, file: &str, line: usize) -> Result<()> {
    let mismatch = |msg: String| AnalysisError::BudgetMismatch {
        file: file.to_string(),
        line,
        msg,
    };
    let expected_sparsity = 1.0 - record.density();
    if record.sparsity.to_bits() != expected_sparsity.to_bits() {
        return Err(mismatch(format!(
            "stored sparsity {} but k'/E_eff gives {}",
            record.sparsity, expected_sparsity
        )));
    }
    if let Some(config) = config_of(record) {
        let (total, active) = budget::count_params(&config);
        if total != record.total_params || active != record.active_params {
            return Err(mismatch(format!(
                "stored params (total {}, active {}) but recount gives (total {total}, active {active})",
                record.total_params, record.active_params
            )));
        }
    }
    Ok(())
}

/// Read run records under `directory` into a validated, deduplicated
/// collection: every top-level `.jsonl` file, plus each immediate
/// subdirectory's `records.jsonl` (the per-run layout the trainer writes).
///
/// Each record's budget fields are recomputed from its config summary and
/// must match what was stored. Duplicate (run_id, step) pairs keep the
/// first occurrence and emit a warning.
pub fn load_runs(directory: &Path) -> Result<LoadOutcome> {
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in std::fs::read_dir(directory)
        .map_err(io_err(directory))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(io_err(directory))?
    {
        let path = entry.path();
        if path.is_dir() {
            let nested = path.join("records.jsonl");
            if nested.is_file() {
                files.push(nested);
            }
        } else if path.extension().is_some_and(|ext| ext == "jsonl") {
            files.push(path);
        }
    }
    files.sort();

    let mut out = LoadOutcome::default();
    let mut seen: BTreeSet<(String, u64)> = BTreeSet::new();
    for path in files {
        let file = path.display().to_string();
        let reader = BufReader::new(File::open(&path).map_err(io_err(&path))?);
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let record: RunRecord =
                serde_json::from_str(&line).map_err(|e| AnalysisError::MalformedLine {
                    file: file.clone(),
                    line: lineno,
                    msg: e.to_string(),
                })?;
            validate_record(&record, &file, lineno)?;
            let key = (record.run_id.clone(), record.step);
            if !seen.insert(key) {
                out.warnings.push(format!(
                    "{file}:{lineno}: duplicate record for ({}, step {}); keeping the first",
                    record.run_id, record.step
                ));
                continue;
            }
            out.records.push(record);
        }
    }
    Ok(out)
}

const CSV_HEADER: &[&str] = &["group", "series", "x", "y", "run_id", "regime"];

/// Write curve sets as a flat CSV (one row per point) plus a JSON file
/// carrying the full series structure. Output is byte-deterministic given
/// identical input; float columns use Rust's shortest round-trip form.
pub fn export_curves(sets: &[CurveSet], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv_path = dir.join("curves.csv");
    let json_path = dir.join("curves.json");

    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| AnalysisError::Io {
        path: csv_path.display().to_string(),
        source: std::io::Error::other(e),
    })?;
    let csv_io = |e: csv::Error| AnalysisError::Io {
        path: csv_path.display().to_string(),
        source: std::io::Error::other(e),
    };
    w.write_record(CSV_HEADER).map_err(csv_io)?;
    for set in sets {
        for series in &set.series {
            for p in &series.points {
                w.write_record([
                    set.group.as_str(),
                    series.label.as_str(),
                    &p.x.to_string(),
                    &p.y.to_string(),
                    p.run_id.as_str(),
                    p.regime.map(Regime::as_str).unwrap_or(""),
                ])
                .map_err(csv_io)?;
            }
        }
    }
    w.flush().map_err(io_err(&csv_path))?;

    let json = serde_json::to_string_pretty(sets).expect("curve sets serialize");
    let mut f = File::create(&json_path).map_err(io_err(&json_path))?;
    f.write_all(json.as_bytes()).map_err(io_err(&json_path))?;
    f.write_all(b"\n").map_err(io_err(&json_path))?;
    Ok((csv_path, json_path))
}

/// Rebuild curve sets from an exported CSV; inverse of the CSV half of
/// [`export_curves`] for well-formed files.
pub fn import_curves_csv(path: &Path) -> Result<Vec<CurveSet>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| AnalysisError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    })?;
    let mut sets: Vec<CurveSet> = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let lineno = i + 2; // header occupies line 1
        let malformed = |msg: String| AnalysisError::MalformedLine {
            file: path.display().to_string(),
            line: lineno,
            msg,
        };
        let row = row.map_err(|e| malformed(e.to_string()))?;
        if row.len() != CSV_HEADER.len() {
            return Err(malformed(format!("expected {} columns", CSV_HEADER.len())));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| malformed(format!("bad float {s:?}: {e}")))
        };
        let point = CurvePoint {
            x: parse(&row[2])?,
            y: parse(&row[3])?,
            run_id: row[4].to_string(),
            regime: match &row[5] {
                "" => None,
                s => Some(
                    Regime::parse(s).ok_or_else(|| malformed(format!("bad regime {s:?}")))?,
                ),
            },
        };
        let group = &row[0];
        let label = &row[1];
        if sets.last().map(|s| s.group.as_str()) != Some(group) {
            sets.push(CurveSet {
                group: group.to_string(),
                series: Vec::new(),
            });
        }
        let set = sets.last_mut().expect("just pushed");
        if set.series.last().map(|s| s.label.as_str()) != Some(label) {
            set.series.push(Series {
                label: label.to_string(),
                points: Vec::new(),
            });
        }
        set.series.last_mut().expect("just pushed").points.push(point);
    }
    Ok(sets)
}
