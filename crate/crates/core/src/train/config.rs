use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sae::Selection;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Reconstruction through the top-k path.
    Topk,
    /// Reconstruction through the ReLU encoder plus an l1 penalty.
    L1,
    /// Top-k reconstruction plus a pull toward the running class-mean code.
    Pass,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(LossMode::Topk),
            "l1" => Ok(LossMode::L1),
            "pass" => Ok(LossMode::Pass),
            other => Err(Error::Config(format!("unknown loss mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub k: usize,
    pub expansion_factor: usize,
    pub alpha_l1: f64,
    pub w_aux: f64,
    pub lr_peak: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dead_threshold: usize,
    pub seed: u64,
    pub selection: Selection,
    /// EMA decay for the class-mean codes (prototype-alignment mode only).
    pub class_mean_decay: f64,
    /// Optimizer steps between log records; 0 means once per epoch.
    pub log_every: usize,
    /// Rows (taken from the front of the data) used for the logged FVU.
    pub eval_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Topk,
            k: 64,
            expansion_factor: 4,
            alpha_l1: 1e-3,
            w_aux: 0.8,
            lr_peak: 5e-4,
            warmup_fraction: 0.05,
            epochs: 100,
            batch_size: 512,
            dead_threshold: 100,
            seed: 0,
            selection: Selection::Magnitude,
            class_mean_decay: 0.99,
            log_every: 0,
            eval_rows: 2048,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return fail(format!("lr_peak must be positive, got {}", self.lr_peak));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if self.mode == LossMode::L1 && !(self.alpha_l1 >= 0.0 && self.alpha_l1.is_finite()) {
            return fail(format!("alpha_l1 must be >= 0, got {}", self.alpha_l1));
        }
        if !self.w_aux.is_finite() || self.w_aux < 0.0 {
            return fail(format!("w_aux must be >= 0, got {}", self.w_aux));
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.expansion_factor == 0 {
            return fail("expansion_factor must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.class_mean_decay) {
            return fail(format!(
                "class_mean_decay must lie in [0, 1), got {}",
                self.class_mean_decay
            ));
        }
        Ok(())
    }
}

/// Linear warmup to `peak` over the first `warmup_fraction` of `total`
/// steps, then linear decay to zero at the last step. Steps count from 1.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    peak: f64,
    warmup: usize,
    total: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_fraction: f64, total: usize) -> Self {
        let warmup = (warmup_fraction * total as f64).floor() as usize;
        Self {
            peak,
            warmup: warmup.min(total),
            total,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step == 0 || step > self.total {
            return 0.0;
        }
        if step <= self.warmup {
            self.peak * step as f64 / self.warmup as f64
        } else {
            let span = (self.total - self.warmup) as f64;
            self.peak * (self.total - step) as f64 / span
        }
    }
}
