//! Score-model contract and the analytic testbed built on it.
//!
//! A [`ScoreModel`] predicts the noise `eps(z, t)` or `eps(z, t, c)` for a
//! latent `z` at discrete timestep `t`. The testbed supplies closed-form
//! Gaussian denoisers ([`GaussianScoreModel`]) and linear low-rank adapters
//! on top of them ([`LowRankAdapter`]).

mod adapter;
mod gaussian;
mod probe;

use std::fmt;

pub use adapter::{
    ConditionEmbeddings, LowRankAdapter, MergedAdapters, Modulation, DEFAULT_STRENGTH,
};
pub use gaussian::{GaussianComponent, GaussianScoreModel};
pub use probe::{similarity_probe, SimilarityTable};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::{GridShape, LatentGrid};

/// Opaque condition ("prompt") identifier; its meaning belongs to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConditionId(pub u32);

impl fmt::Display for ConditionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// A noise-prediction network. Implementations must be pure and reentrant.
pub trait ScoreModel<T: Scalar>: Send + Sync {
    fn shape(&self) -> GridShape;

    fn schedule(&self) -> &NoiseSchedule<T>;

    /// `eps(z, t)` when `condition` is `None`, `eps(z, t, c)` otherwise.
    fn predict_noise(
        &self,
        z: &LatentGrid<T>,
        t: usize,
        condition: Option<ConditionId>,
    ) -> Result<LatentGrid<T>>;
}

impl<T: Scalar, M: ScoreModel<T> + ?Sized> ScoreModel<T> for std::sync::Arc<M> {
    fn shape(&self) -> GridShape {
        (**self).shape()
    }
    fn schedule(&self) -> &NoiseSchedule<T> {
        (**self).schedule()
    }
    fn predict_noise(
        &self,
        z: &LatentGrid<T>,
        t: usize,
        condition: Option<ConditionId>,
    ) -> Result<LatentGrid<T>> {
        (**self).predict_noise(z, t, condition)
    }
}

/// Evaluates a model after checking the latent shape and timestep.
pub fn score_eval<T: Scalar>(
    model: &dyn ScoreModel<T>,
    z: &LatentGrid<T>,
    t: usize,
    condition: Option<ConditionId>,
) -> Result<LatentGrid<T>> {
    check_inputs(model.shape(), model.schedule(), z, t)?;
    model.predict_noise(z, t, condition)
}

pub(crate) fn check_inputs<T: Scalar>(
    shape: GridShape,
    schedule: &NoiseSchedule<T>,
    z: &LatentGrid<T>,
    t: usize,
) -> Result<()> {
    if z.shape() != shape {
        return Err(Error::ShapeMismatch {
            expected: shape.to_string(),
            found: z.shape().to_string(),
        });
    }
    if t > schedule.total_steps() {
        return Err(Error::InvalidTimestep {
            t,
            total: schedule.total_steps(),
        });
    }
    Ok(())
}
