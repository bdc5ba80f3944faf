//! Training-free composition of low-rank adapter score models.
//!
//! At every denoising step each adapter's conditional noise prediction is
//! compared, patch by patch, with the base model's prediction. Patches where an
//! adapter departs from the base are the ones it is confident about, so a
//! temperature-scaled softmin over adapters turns similarities into spatial
//! mixing weights. The unconditional branch is re-centered on the base model
//! before classifier-free guidance, and an optional top-k mask selects the
//! relevant adapters out of a large loaded pool.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common double-precision case.

pub mod composer;
pub mod error;
pub mod models;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod tensor;

pub use composer::{
    compose_step, CompositionMethod, GuidanceConfig, StepOutput, TemperatureRule, TopKScope,
    WeightMatrix,
};
pub use error::{Error, Result};
pub use models::{
    ConditionEmbeddings, ConditionId, GaussianComponent, GaussianScoreModel, LowRankAdapter,
    MergedAdapters, Modulation, ScoreModel,
};
pub use sampler::{Ensemble, SamplerConfig, SamplerMode, Trajectory};
pub use scalar::Scalar;
pub use schedule::NoiseSchedule;
pub use tensor::{GridShape, LatentGrid, PatchLayout, PatchSet, PlanarMap};

pub type LatentGridF64 = LatentGrid<f64>;
pub type LatentGridF32 = LatentGrid<f32>;
pub type PlanarMapF64 = PlanarMap<f64>;
pub type WeightMatrixF64 = WeightMatrix<f64>;
pub type GuidanceConfigF64 = GuidanceConfig<f64>;
pub type NoiseScheduleF64 = NoiseSchedule<f64>;
pub type GaussianScoreModelF64 = GaussianScoreModel<f64>;
pub type LowRankAdapterF64 = LowRankAdapter<f64>;
pub type TrajectoryF64 = Trajectory<f64>;
pub type DynScoreModelF64 = dyn ScoreModel<f64>;
