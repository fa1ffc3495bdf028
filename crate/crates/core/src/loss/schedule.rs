//! Augmentation-strength schedule: zero during the deferred phase, then a
//! linear ramp `lambda = (t/T) * base`.

use super::{kernel, LossConfig, StrengthMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    /// `T`, the total number of optimizer iterations.
    pub total_iters: u64,
    /// Fraction of `T` during which the strength is held at zero.
    pub deferred_fraction: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::invalid("schedule total iterations", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.deferred_fraction) {
            return Err(Error::invalid(
                "sched.deferred_fraction",
                format!("must lie in [0, 1], got {}", self.deferred_fraction),
            ));
        }
        Ok(())
    }

    /// True while `t < deferred_fraction * T`.
    pub fn is_deferred(&self, t: u64) -> bool {
        let t = t.min(self.total_iters);
        (t as f64) < self.deferred_fraction * self.total_iters as f64
    }

    /// `t/T` once the deferred phase is over, otherwise 0. `t` is clamped to `T`.
    pub fn ramp(&self, t: u64) -> f64 {
        if self.is_deferred(t) {
            0.0
        } else {
            t.min(self.total_iters) as f64 / self.total_iters as f64
        }
    }
}

/// Augmentation strength for one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strength {
    /// The same `lambda` for every sample.
    Fixed(f64),
    /// Per-sample `lambda_i = ramp * coef(cos_y_i)`.
    Ramp { ramp: f64, mode: StrengthMode },
}

impl Strength {
    pub fn is_zero(&self) -> bool {
        match *self {
            Strength::Fixed(l) => l == 0.0,
            Strength::Ramp { ramp, .. } => ramp == 0.0,
        }
    }

    pub fn fixed(&self) -> Option<f64> {
        match *self {
            Strength::Fixed(l) => Some(l),
            Strength::Ramp { .. } => None,
        }
    }

    /// The strength applied to a sample with target cosine `cos_y`.
    pub fn resolve(&self, cos_y: f64, gamma: f64) -> f64 {
        match *self {
            Strength::Fixed(l) => l,
            Strength::Ramp { ramp, mode } => ramp * kernel::coefficient(mode.coefficient(), cos_y, gamma).0,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let v = match *self {
            Strength::Fixed(l) => l,
            Strength::Ramp { ramp, .. } => ramp,
        };
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::invalid("lambda", format!("must be >= 0, got {v}")));
        }
        Ok(())
    }
}

/// Strength at iteration `t`: `(t/T) * lambda0` in constant mode, or the ramp
/// factor that multiplies each sample's DA/DY coefficient otherwise.
pub fn lambda_schedule(t: u64, config: &LossConfig) -> Strength {
    let ramp = config.schedule.ramp(t);
    match config.strength_mode {
        StrengthMode::Constant => Strength::Fixed(ramp * config.lambda0),
        mode => Strength::Ramp { ramp, mode },
    }
}
