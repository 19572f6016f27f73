use serde::{Deserialize, Serialize};

fn default_floor() -> f64 {
    0.1
}

/// Linear warmup to the peak, then cosine decay to floor·peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Final LR as a fraction of the peak.
    #[serde(default = "default_floor")]
    pub floor_fraction: f64,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Schedule {
            peak_lr,
            warmup_steps,
            total_steps,
            floor_fraction: default_floor(),
        }
    }
}

/// Learning rate at a step. Steps past `total_steps` clamp to the floor.
pub fn lr_at(schedule: &Schedule, step: u64) -> f64 {
    let s = schedule;
    if step <= s.warmup_steps {
        if s.warmup_steps == 0 {
            return s.peak_lr;
        }
        return s.peak_lr * step as f64 / s.warmup_steps as f64;
    }
    let floor = s.floor_fraction * s.peak_lr;
    if step >= s.total_steps {
        return floor;
    }
    let progress = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    floor + (s.peak_lr - floor) * cos
}
