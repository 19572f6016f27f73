use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::records::RunRecord;
use super::{AnalysisError, Result};
use crate::budget;

/// Which side of the task-loss minimizer a point sits on, along the
/// direction of increasing scale (decreasing train loss).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Standard,
    Inverse,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Standard => "standard",
            Regime::Inverse => "inverse",
        }
    }

    pub fn parse(s: &str) -> Option<Regime> {
        match s {
            "standard" => Some(Regime::Standard),
            "inverse" => Some(Regime::Inverse),
            _ => None,
        }
    }
}

/// Output of [`detect_inverse_scaling`]: the input series sorted by train
/// loss descending, with a regime label per point.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSplit {
    /// (train_loss, task_metric) sorted by train loss descending, i.e. in
    /// the direction of increasing scale.
    pub points: Vec<(f64, f64)>,
    /// Index of the task-metric minimizer within `points`.
    pub minimizer: usize,
    /// Regime of each point, parallel to `points`.
    pub regimes: Vec<Regime>,
}

impl RegimeSplit {
    pub fn minimizer_point(&self) -> (f64, f64) {
        self.points[self.minimizer]
    }

    pub fn standard(&self) -> Vec<(f64, f64)> {
        self.in_regime(Regime::Standard)
    }

    pub fn inverse(&self) -> Vec<(f64, f64)> {
        self.in_regime(Regime::Inverse)
    }

    fn in_regime(&self, want: Regime) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .zip(&self.regimes)
            .filter(|(_, &r)| r == want)
            .map(|(&p, _)| p)
            .collect()
    }
}

/// Split a (train_loss, task_metric) series at the task-metric minimizer.
///
/// Points are sorted by train loss descending; the minimizer is the point
/// with the lowest metric (highest, for accuracy series — those are folded
/// to error rate internally so one rule serves both). Ties break toward
/// the higher train loss, a conservative regime boundary. Points with
/// train loss strictly below the minimizer's are the inverse regime.
pub fn detect_inverse_scaling(
    series: &[(f64, f64)],
    metric_is_accuracy: bool,
) -> Result<RegimeSplit> {
    if series.len() < 3 {
        return Err(AnalysisError::InsufficientData {
            need: 3,
            got: series.len(),
        });
    }
    let mut points = series.to_vec();
    points.sort_by(|a, b| b.partial_cmp(a).expect("non-finite series point"));
    let internal = |y: f64| if metric_is_accuracy { 1.0 - y } else { y };

    let mut minimizer = 0;
    for (i, &(_, y)) in points.iter().enumerate() {
        // Strict improvement only: earlier index means higher train loss,
        // which wins ties.
        if internal(y) < internal(points[minimizer].1) {
            minimizer = i;
        }
    }
    let pivot = points[minimizer].0;
    let regimes = points
        .iter()
        .map(|&(train_loss, _)| {
            if train_loss < pivot {
                Regime::Inverse
            } else {
                Regime::Standard
            }
        })
        .collect();
    Ok(RegimeSplit {
        points,
        minimizer,
        regimes,
    })
}

/// One plotted point, traceable to the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<Regime>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    /// Ordered by x ascending.
    pub points: Vec<CurvePoint>,
}

/// A family of series under one grouping key (e.g. an active-parameter
/// budget, or "top-k" for TPP curves).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub group: String,
    pub series: Vec<Series>,
}

/// One active-parameter budget's density sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityCurve {
    pub active_params: u64,
    /// Density k'/E_eff at the extremal metric value.
    pub optimal_density: f64,
    /// x = density, y = metric, ordered by density ascending, regime
    /// annotations attached when the group has ≥3 points.
    pub points: Vec<CurvePoint>,
}

/// Metric value for `task` on a record. The pseudo-task `val_ce` reads the
/// validation cross-entropy; anything else reads the per-task map.
fn metric_of(record: &RunRecord, task: &str, accuracy: bool) -> Option<f64> {
    if task == "val_ce" {
        return if accuracy { None } else { Some(record.val_ce) };
    }
    let (loss, acc) = *record.tasks.as_ref()?.get(task)?;
    Some(if accuracy { acc } else { loss })
}

/// Keep only each run's latest record.
fn final_records(records: &[RunRecord]) -> Vec<&RunRecord> {
    let mut latest: BTreeMap<&str, &RunRecord> = BTreeMap::new();
    for r in records {
        match latest.get(r.run_id.as_str()) {
            Some(prev) if prev.step >= r.step => {}
            _ => {
                latest.insert(&r.run_id, r);
            }
        }
    }
    latest.into_values().collect()
}

/// Density sweeps grouped by active-parameter budget.
///
/// Each group is ordered by density; the optimal density is where the
/// metric is extremal (lowest loss, or highest accuracy). Regime labels
/// come from [`detect_inverse_scaling`] over (train CE, metric). Groups
/// with fewer than two densities are skipped with a notice, as are runs
/// missing the requested task.
pub fn optimal_density(
    records: &[RunRecord],
    task: &str,
    metric_is_accuracy: bool,
) -> (Vec<DensityCurve>, Vec<String>) {
    let mut notices = Vec::new();
    let mut with_metric: Vec<&RunRecord> = Vec::new();
    for r in final_records(records) {
        if metric_of(r, task, metric_is_accuracy).is_none() {
            notices.push(format!("run {} has no metric for task {task}", r.run_id));
            continue;
        }
        with_metric.push(r);
    }
    // Cluster active-parameter budgets within 2% relative: sparsity sweeps
    // at matched budget still differ slightly (the router rows scale with
    // E), and exact grouping would split every sweep into singletons.
    with_metric.sort_by_key(|r| r.active_params);
    let mut groups: BTreeMap<u64, Vec<&RunRecord>> = BTreeMap::new();
    let mut anchor: Option<u64> = None;
    for r in with_metric {
        let key = match anchor {
            Some(a) if r.active_params as f64 <= a as f64 * 1.02 => a,
            _ => {
                anchor = Some(r.active_params);
                r.active_params
            }
        };
        groups.entry(key).or_default().push(r);
    }

    let mut curves = Vec::new();
    for (active, group) in groups {
        let densities: std::collections::BTreeSet<u64> =
            group.iter().map(|r| r.density().to_bits()).collect();
        if densities.len() < 2 {
            notices.push(format!(
                "active-parameter group {active} has a single density; skipped"
            ));
            continue;
        }
        let metric =
            |r: &RunRecord| metric_of(r, task, metric_is_accuracy).expect("filtered above");
        let internal = |y: f64| if metric_is_accuracy { 1.0 - y } else { y };

        // Regimes over the train-loss axis, mapped back through run ids.
        let mut regime_by_run: BTreeMap<&str, Regime> = BTreeMap::new();
        if group.len() >= 3 {
            let series: Vec<(f64, f64)> =
                group.iter().map(|r| (r.train_ce, metric(r))).collect();
            if let Ok(split) = detect_inverse_scaling(&series, metric_is_accuracy) {
                for r in &group {
                    let key = (r.train_ce, metric(r));
                    let idx = split
                        .points
                        .iter()
                        .position(|&p| p == key)
                        .expect("point came from this series");
                    regime_by_run.insert(&r.run_id, split.regimes[idx]);
                }
            }
        }

        let mut points: Vec<CurvePoint> = group
            .iter()
            .map(|r| CurvePoint {
                x: r.density(),
                y: metric(r),
                run_id: r.run_id.clone(),
                regime: regime_by_run.get(r.run_id.as_str()).copied(),
            })
            .collect();
        points.sort_by(|a, b| {
            a.x.partial_cmp(&b.x)
                .unwrap()
                .then_with(|| a.run_id.cmp(&b.run_id))
        });
        let best = points
            .iter()
            .min_by(|a, b| internal(a.y).partial_cmp(&internal(b.y)).unwrap())
            .expect("non-empty group");
        curves.push(DensityCurve {
            active_params: active,
            optimal_density: best.x,
            points,
        });
    }
    (curves, notices)
}

/// Tokens-per-parameter curve: x = tokens seen ÷ total params, y = task
/// metric, one series per top-k value.
pub fn tpp_curve(records: &[RunRecord], task: &str, metric_is_accuracy: bool) -> CurveSet {
    let mut by_k: BTreeMap<usize, Vec<CurvePoint>> = BTreeMap::new();
    for r in final_records(records) {
        let Some(y) = metric_of(r, task, metric_is_accuracy) else {
            continue;
        };
        let x = budget::tpp(r.tokens_seen as f64, r.total_params as f64)
            .expect("records carry nonzero param counts");
        by_k.entry(r.top_k).or_default().push(CurvePoint {
            x,
            y,
            run_id: r.run_id.clone(),
            regime: None,
        });
    }
    let series = by_k
        .into_iter()
        .map(|(k, mut points)| {
            points.sort_by(|a, b| {
                a.x.partial_cmp(&b.x)
                    .unwrap()
                    .then_with(|| a.run_id.cmp(&b.run_id))
            });
            Series {
                label: format!("k={k}"),
                points,
            }
        })
        .collect();
    CurveSet {
        group: format!("tpp:{task}"),
        series,
    }
}
