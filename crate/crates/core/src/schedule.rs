//! Growing batch-size schedule: the inverse of cosine annealing without
//! restarts, standing in for learning-rate decay under a constant rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Initial batch size.
    pub b0: usize,
    /// Upper clamp on the batch size.
    pub bmax: usize,
    /// Total training steps.
    pub total_steps: usize,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b0 == 0 {
            return Err(Error::Parameter("b0 must be >= 1".into()));
        }
        if self.bmax < self.b0 {
            return Err(Error::Parameter(format!(
                "bmax {} must be >= b0 {}",
                self.bmax, self.b0
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Parameter("total_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Absorbs representation error at exact rational progress points (the growth
/// factor is an integer there, e.g. 2 at p = 1/2), so the floor below never
/// drops a mathematically attained value.
const FLOOR_EPS: f64 = 1e-9;

/// Batch size at step `t`: `clamp(b0 * floor(2 / (1 + cos(pi * t/T))), b0, bmax)`.
/// Non-decreasing in `t`; the divergence as progress approaches 1 is handled
/// by the `bmax` clamp.
pub fn batch_size_schedule(t: usize, cfg: &ScheduleConfig) -> Result<usize> {
    cfg.validate()?;
    if t >= cfg.total_steps {
        return Err(Error::Range(format!(
            "step {t} out of range for {} total steps",
            cfg.total_steps
        )));
    }
    let progress = t as f64 / cfg.total_steps as f64;
    let denom = 1.0 + (std::f64::consts::PI * progress).cos();
    let factor = if denom <= 0.0 {
        f64::INFINITY
    } else {
        (2.0 / denom + FLOOR_EPS).floor()
    };
    let scaled = (cfg.b0 as f64 * factor).min(cfg.bmax as f64);
    Ok((scaled as usize).clamp(cfg.b0, cfg.bmax))
}
