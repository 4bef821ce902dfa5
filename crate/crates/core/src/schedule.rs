//! Noise schedule of the absorbing forward process.
//!
//! Time runs over `[0, 1]` with `alpha(0) = 1` (clean) and `alpha(1) = 0`
//! (fully masked). The reverse process is discretised on the grid
//! `t = k / S` for `k = S, S-1, ..., 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// Total number of reverse steps.
    pub steps: usize,
}

const GRID_TOL: f64 = 1e-9;

impl NoiseSchedule {
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        Ok(Self {
            kind: ScheduleKind::Linear,
            steps,
        })
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Time at the start of reverse step `k` (0-based, `k < steps`).
    pub fn time_at_step(&self, k: usize) -> f64 {
        (self.steps - k) as f64 / self.steps as f64
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) || t.is_nan() {
            return Err(Error::domain(format!("t = {t} outside [0, 1]")));
        }
        Ok(match self.kind {
            ScheduleKind::Linear => 1.0 - t,
        })
    }

    fn check_grid(&self, t: f64) -> Result<()> {
        if t <= 0.0 || t > 1.0 || t.is_nan() {
            return Err(Error::domain(format!(
                "t = {t} outside (0, 1]; the reverse process ends at t = dt"
            )));
        }
        let k = t * self.steps as f64;
        if (k - k.round()).abs() > GRID_TOL * self.steps as f64 {
            return Err(Error::domain(format!(
                "t = {t} is not a multiple of dt = {}",
                self.dt()
            )));
        }
        Ok(())
    }

    /// The factor `dt / (1 - alpha_t)` scaling the per-position unmask
    /// probability in the reverse step from `t` to `t - dt`.
    pub fn unmask_multiplier(&self, t: f64) -> Result<f64> {
        self.check_grid(t)?;
        Ok(match self.kind {
            // 1 - alpha_t = t exactly; dividing by t keeps the final-step
            // multiplier at exactly 1.
            ScheduleKind::Linear => self.dt() / t,
        })
    }

    /// Per-step NELBO weight `(alpha_{t-dt} - alpha_t) / (1 - alpha_t)`.
    pub fn nelbo_weight(&self, t: f64) -> Result<f64> {
        self.check_grid(t)?;
        Ok(match self.kind {
            ScheduleKind::Linear => self.dt() / t,
        })
    }
}
