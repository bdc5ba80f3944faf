use std::f64::consts::PI;

use super::{check_inputs, ConditionId, ScoreModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::{GridShape, LatentGrid};

/// One isotropic Gaussian `N(mean, variance * I)` selected by a condition.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent<T> {
    pub condition: ConditionId,
    pub mean: Vec<T>,
    pub variance: T,
    /// Mixture weight in the unconditional distribution.
    pub weight: T,
}

/// Exact denoiser for data drawn from a mixture of isotropic Gaussians.
///
/// Under `z_t = sqrt(ab) x0 + sqrt(1 - ab) eps` the diffused component is
/// `N(sqrt(ab) mu, (ab s^2 + 1 - ab) I)`, so the posterior-mean noise is
/// `sqrt(1 - ab) (z - sqrt(ab) mu) / (ab s^2 + 1 - ab)`. The unconditional
/// prediction weights the per-component predictions by their posterior
/// responsibilities.
#[derive(Debug, Clone)]
pub struct GaussianScoreModel<T> {
    shape: GridShape,
    schedule: NoiseSchedule<T>,
    components: Vec<GaussianComponent<T>>,
}

impl<T: Scalar> GaussianScoreModel<T> {
    pub fn new(
        shape: GridShape,
        schedule: NoiseSchedule<T>,
        components: Vec<GaussianComponent<T>>,
    ) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidConfig("at least one component required".into()));
        }
        let mut total = 0.0;
        for (i, comp) in components.iter().enumerate() {
            if comp.mean.len() != shape.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("mean of length {}", shape.len()),
                    found: format!("length {}", comp.mean.len()),
                });
            }
            if comp.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("component mean"));
            }
            if !(comp.variance > T::zero() && comp.variance.is_finite()) {
                return Err(Error::InvalidRange(format!(
                    "variance of {} must be positive",
                    comp.condition
                )));
            }
            if !(comp.weight >= T::zero()) {
                return Err(Error::InvalidRange("mixture weights must be >= 0".into()));
            }
            if components[..i].iter().any(|c| c.condition == comp.condition) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate condition {}",
                    comp.condition
                )));
            }
            total += comp.weight.as_f64();
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidRange(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            shape,
            schedule,
            components,
        })
    }

    /// Single-component model: conditional and unconditional coincide.
    pub fn single(
        shape: GridShape,
        schedule: NoiseSchedule<T>,
        condition: ConditionId,
        mean: Vec<T>,
        variance: T,
    ) -> Result<Self> {
        Self::new(
            shape,
            schedule,
            vec![GaussianComponent {
                condition,
                mean,
                variance,
                weight: T::one(),
            }],
        )
    }

    pub fn components(&self) -> &[GaussianComponent<T>] {
        &self.components
    }

    pub fn component(&self, condition: ConditionId) -> Result<&GaussianComponent<T>> {
        self.components
            .iter()
            .find(|c| c.condition == condition)
            .ok_or(Error::UnknownCondition(condition))
    }

    fn component_eps(&self, comp: &GaussianComponent<T>, z: &[T], ab: T) -> Vec<T> {
        let sa = ab.sqrt();
        let scale = (T::one() - ab).sqrt() / (ab * comp.variance + T::one() - ab);
        z.iter()
            .zip(&comp.mean)
            .map(|(&zi, &mi)| scale * (zi - sa * mi))
            .collect()
    }

    /// Log-density of each diffused component at `z`, including its mixture weight.
    fn weighted_log_densities(&self, z: &[T], ab: T) -> Vec<T> {
        let sa = ab.sqrt();
        let dim = T::of(z.len() as f64);
        self.components
            .iter()
            .map(|comp| {
                let var = ab * comp.variance + T::one() - ab;
                let sq = z
                    .iter()
                    .zip(&comp.mean)
                    .fold(T::zero(), |acc, (&zi, &mi)| {
                        let d = zi - sa * mi;
                        acc + d * d
                    });
                comp.weight.ln()
                    - sq / (T::of(2.0) * var)
                    - T::of(0.5) * dim * (T::of(2.0 * PI) * var).ln()
            })
            .collect()
    }

    /// Closed-form `log p_t(z)` or `log p_t(z | c)`.
    pub fn log_density(
        &self,
        z: &LatentGrid<T>,
        t: usize,
        condition: Option<ConditionId>,
    ) -> Result<T> {
        check_inputs(self.shape, &self.schedule, z, t)?;
        let ab = self.schedule.alpha_bar(t)?;
        let logs = self.weighted_log_densities(z.as_slice(), ab);
        match condition {
            Some(c) => {
                let idx = self
                    .components
                    .iter()
                    .position(|comp| comp.condition == c)
                    .ok_or(Error::UnknownCondition(c))?;
                Ok(logs[idx] - self.components[idx].weight.ln())
            }
            None => {
                let max = logs.iter().copied().fold(T::neg_infinity(), T::max);
                Ok(max + logs.iter().map(|&l| (l - max).exp()).sum::<T>().ln())
            }
        }
    }

    /// Posterior responsibilities of each component given `z_t`.
    pub fn responsibilities(&self, z: &LatentGrid<T>, t: usize) -> Result<Vec<T>> {
        check_inputs(self.shape, &self.schedule, z, t)?;
        let ab = self.schedule.alpha_bar(t)?;
        let logs = self.weighted_log_densities(z.as_slice(), ab);
        let max = logs.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = logs.iter().map(|&l| (l - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        Ok(exps.into_iter().map(|e| e / total).collect())
    }
}

impl<T: Scalar> ScoreModel<T> for GaussianScoreModel<T> {
    fn shape(&self) -> GridShape {
        self.shape
    }

    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    fn predict_noise(
        &self,
        z: &LatentGrid<T>,
        t: usize,
        condition: Option<ConditionId>,
    ) -> Result<LatentGrid<T>> {
        check_inputs(self.shape, &self.schedule, z, t)?;
        let ab = self.schedule.alpha_bar(t)?;
        let data = match condition {
            Some(c) => self.component_eps(self.component(c)?, z.as_slice(), ab),
            None if self.components.len() == 1 => {
                self.component_eps(&self.components[0], z.as_slice(), ab)
            }
            None => {
                let resp = self.responsibilities(z, t)?;
                let mut out = vec![T::zero(); self.shape.len()];
                for (comp, &r) in self.components.iter().zip(&resp) {
                    if r == T::zero() {
                        continue;
                    }
                    for (o, e) in out.iter_mut().zip(self.component_eps(comp, z.as_slice(), ab)) {
                        *o = *o + r * e;
                    }
                }
                out
            }
        };
        Ok(LatentGrid::from_raw(self.shape, data))
    }
}
