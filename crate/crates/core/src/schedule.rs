//! Discrete variance-preserving noise schedules.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cumulative signal retention `alpha_bar[t]` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    alpha_bar: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Wraps an explicit `alpha_bar` sequence.
    ///
    /// The sequence must start at exactly 1, stay in `(0, 1]` and be strictly
    /// decreasing after index 0.
    pub fn from_alpha_bar(alpha_bar: Vec<T>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if alpha_bar[0] != T::one() {
            return Err(Error::InvalidRange("alpha_bar[0] must equal 1".into()));
        }
        for (t, pair) in alpha_bar.windows(2).enumerate() {
            if !(pair[1] > T::zero() && pair[1] < pair[0]) {
                return Err(Error::InvalidRange(format!(
                    "alpha_bar must be strictly decreasing in (0, 1]; violated at step {}",
                    t + 1
                )));
            }
        }
        Ok(Self { alpha_bar })
    }

    /// Linear-beta VP discretization: `beta_t` runs linearly from `beta_start`
    /// (step 1) to `beta_end` (step T) and `alpha_bar_t = prod (1 - beta_s)`.
    pub fn linear_vp(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("steps must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(T::one());
        let mut acc = 1.0f64;
        for s in 0..steps {
            let frac = if steps == 1 {
                0.0
            } else {
                s as f64 / (steps - 1) as f64
            };
            let beta = beta_start + (beta_end - beta_start) * frac;
            acc *= 1.0 - beta;
            alpha_bar.push(T::of(acc));
        }
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn total_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<T> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::InvalidTimestep {
                t,
                total: self.total_steps(),
            })
    }

    pub fn values(&self) -> &[T] {
        &self.alpha_bar
    }
}

/// Builds the standard linear-beta schedule.
pub fn build_vp_schedule<T: Scalar>(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule<T>> {
    NoiseSchedule::linear_vp(steps, beta_start, beta_end)
}
