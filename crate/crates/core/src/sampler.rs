//! Reverse-process sampling driven by a composition method.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::composer::{predict_step, CompositionMethod, GuidanceConfig, WeightMatrix};
use crate::error::{Error, Result};
use crate::models::{ConditionId, ScoreModel};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::{GridShape, LatentGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplerMode {
    /// DDIM with eta = 0.
    #[default]
    Deterministic,
    /// DDIM with eta = 1 (fresh Gaussian noise every step).
    Ancestral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig<T> {
    pub schedule: NoiseSchedule<T>,
    pub mode: SamplerMode,
    pub seed: u64,
    pub record_weights: bool,
    /// Keep `z_t` and the per-step `x0` estimate in every record.
    pub record_latents: bool,
}

impl<T: Scalar> SamplerConfig<T> {
    pub fn new(schedule: NoiseSchedule<T>, seed: u64) -> Self {
        Self {
            schedule,
            mode: SamplerMode::Deterministic,
            seed,
            record_weights: false,
            record_latents: false,
        }
    }

    pub fn steps(&self) -> usize {
        self.schedule.total_steps()
    }
}

/// Models and guidance settings for one sampling task.
#[derive(Clone, Copy)]
pub struct Ensemble<'a, T: Scalar> {
    pub base: &'a dyn ScoreModel<T>,
    pub adapters: &'a [&'a dyn ScoreModel<T>],
    pub condition: ConditionId,
    pub method: CompositionMethod,
    pub guidance: &'a GuidanceConfig<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<T> {
    /// Timestep of the latent the step started from.
    pub t: usize,
    pub latent: Option<LatentGrid<T>>,
    pub x0_estimate: Option<LatentGrid<T>>,
    pub omega_raw: Option<WeightMatrix<T>>,
    pub omega_gated: Option<WeightMatrix<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    /// One record per step, ordered from `t = T` down to `t = 1`.
    pub steps: Vec<StepRecord<T>>,
    pub final_latent: LatentGrid<T>,
}

/// Deterministic per-trajectory random stream.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn standard_normal_grid<T: Scalar>(shape: GridShape, rng: &mut ChaCha8Rng) -> LatentGrid<T> {
    LatentGrid::from_fn(shape, |_, _, _| {
        T::of(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
    })
}

fn check_schedule<T: Scalar>(ensemble: &Ensemble<'_, T>, cfg: &SamplerConfig<T>) -> Result<()> {
    let models = std::iter::once(ensemble.base).chain(ensemble.adapters.iter().copied());
    for model in models {
        if model.schedule() != &cfg.schedule {
            return Err(Error::ScheduleMismatch(format!(
                "sampler has {} steps, a model has {} (or different values)",
                cfg.steps(),
                model.schedule().total_steps()
            )));
        }
    }
    if ensemble.method != CompositionMethod::BaseOnly && ensemble.adapters.is_empty() {
        return Err(Error::InvalidConfig("composition needs at least one adapter".into()));
    }
    ensemble.guidance.validate(ensemble.adapters.len().max(1))
}

/// Runs trajectory `index` of the seeded stream from `z_T ~ N(0, I)`.
pub fn sample<T: Scalar>(
    ensemble: &Ensemble<'_, T>,
    cfg: &SamplerConfig<T>,
    index: u64,
) -> Result<Trajectory<T>> {
    check_schedule(ensemble, cfg)?;
    let mut rng = trajectory_rng(cfg.seed, index);
    let z_init = standard_normal_grid(ensemble.base.shape(), &mut rng);
    run_from(ensemble, cfg, z_init, &mut rng)
}

/// Runs the reverse loop from a given `z_T`.
pub fn sample_from<T: Scalar>(
    ensemble: &Ensemble<'_, T>,
    cfg: &SamplerConfig<T>,
    z_init: LatentGrid<T>,
    index: u64,
) -> Result<Trajectory<T>> {
    check_schedule(ensemble, cfg)?;
    let mut rng = trajectory_rng(cfg.seed, index);
    run_from(ensemble, cfg, z_init, &mut rng)
}

fn run_from<T: Scalar>(
    ensemble: &Ensemble<'_, T>,
    cfg: &SamplerConfig<T>,
    mut z: LatentGrid<T>,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory<T>> {
    let steps = cfg.steps();
    let mut records = Vec::with_capacity(steps);
    for t in (1..=steps).rev() {
        let out = predict_step(
            ensemble.method,
            ensemble.base,
            ensemble.adapters,
            &z,
            t,
            ensemble.condition,
            ensemble.guidance,
        )?;
        let ab = cfg.schedule.alpha_bar(t)?;
        let ab_prev = cfg.schedule.alpha_bar(t - 1)?;
        let (sa, s1a) = (ab.sqrt(), (T::one() - ab).sqrt());
        let x0 = z.zip_with(&out.eps, |zi, ei| (zi - s1a * ei) / sa)?;

        let next = match cfg.mode {
            SamplerMode::Deterministic => {
                let (sp, s1p) = (ab_prev.sqrt(), (T::one() - ab_prev).sqrt());
                x0.zip_with(&out.eps, |xi, ei| sp * xi + s1p * ei)?
            }
            SamplerMode::Ancestral => {
                let sigma2 = (T::one() - ab_prev) / (T::one() - ab) * (T::one() - ab / ab_prev);
                let sigma = sigma2.max(T::zero()).sqrt();
                let dir = (T::one() - ab_prev - sigma2).max(T::zero()).sqrt();
                let sp = ab_prev.sqrt();
                let noise: LatentGrid<T> = standard_normal_grid(z.shape(), rng);
                let mean = x0.zip_with(&out.eps, |xi, ei| sp * xi + dir * ei)?;
                mean.zip_with(&noise, |m, n| m + sigma * n)?
            }
        };
        if !next.is_finite() {
            return Err(Error::NonFinite("sampler latent"));
        }

        records.push(StepRecord {
            t,
            latent: cfg.record_latents.then(|| z.clone()),
            x0_estimate: cfg.record_latents.then(|| x0.clone()),
            omega_raw: if cfg.record_weights { out.omega_raw } else { None },
            omega_gated: if cfg.record_weights {
                out.omega_gated
            } else {
                None
            },
        });
        z = next;
    }
    Ok(Trajectory {
        steps: records,
        final_latent: z,
    })
}

/// Samples trajectories `0..count` on a pool of `jobs` threads (0 = all cores).
///
/// Each trajectory owns its random stream, so results do not depend on `jobs`.
pub fn sample_batch<T: Scalar>(
    ensemble: &Ensemble<'_, T>,
    cfg: &SamplerConfig<T>,
    count: usize,
    jobs: usize,
) -> Result<Vec<Trajectory<T>>> {
    check_schedule(ensemble, cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| {
        (0..count as u64)
            .into_par_iter()
            .map(|i| sample(ensemble, cfg, i))
            .collect()
    })
}

/// Per-step, per-adapter mean gated weight over patches: `(t, means)` rows.
pub fn omega_trace<T: Scalar>(traj: &Trajectory<T>) -> Result<Vec<(usize, Vec<T>)>> {
    traj.steps
        .iter()
        .map(|s| {
            s.omega_gated
                .as_ref()
                .map(|w| (s.t, w.row_means()))
                .ok_or(Error::MissingWeights)
        })
        .collect()
}
