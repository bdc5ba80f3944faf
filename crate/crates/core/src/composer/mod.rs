//! Multi-adapter score composition.
//!
//! Each adapter's conditional prediction is compared patch by patch with the
//! base model's conditional prediction. Low similarity marks the regions an
//! adapter actually changes, so a softmin over adapters turns the similarity
//! matrix into per-patch mixing weights. The weights blend both the
//! conditional and unconditional adapter predictions, and the unconditional
//! blend is pulled back toward the base model before classifier-free guidance.

mod gating;

pub use gating::{
    adaptive_tau, softmin_gate, topk_mask, topk_mask_scoped, TemperatureRule,
    TemperatureSchedule, TopKScope, WeightMatrix,
};

use crate::error::{Error, Result};
use crate::models::{ConditionId, ScoreModel};
use crate::scalar::Scalar;
use crate::tensor::{
    channel_mean, cosine_similarity, kron_upsample_with, patchify_with, LatentGrid, PatchLayout,
    PlanarMap,
};

/// Lower bound applied to every temperature the schedule emits.
pub const DEFAULT_TAU_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig<T> {
    /// Classifier-free guidance scale `s >= 1`.
    pub guidance_scale: T,
    /// Weight of the gated adapter aggregate in the unconditional blend.
    pub recenter_lambda: T,
    pub patch_size: usize,
    pub temperature: TemperatureRule<T>,
    pub temperature_floor: T,
    pub top_k: Option<usize>,
    pub top_k_scope: TopKScope,
    /// Whole-grid similarity and no re-centering.
    pub global_mode: bool,
    /// Per-adapter weights for the naive baseline; all ones when `None`.
    pub naive_weights: Option<Vec<T>>,
}

impl<T: Scalar> Default for GuidanceConfig<T> {
    fn default() -> Self {
        Self {
            guidance_scale: T::of(7.0),
            recenter_lambda: T::of(0.5),
            patch_size: 2,
            temperature: TemperatureRule::Adaptive,
            temperature_floor: T::of(DEFAULT_TAU_FLOOR),
            top_k: None,
            top_k_scope: TopKScope::PerPatch,
            global_mode: false,
            naive_weights: None,
        }
    }
}

impl<T: Scalar> GuidanceConfig<T> {
    pub fn validate(&self, n_adapters: usize) -> Result<()> {
        if !(self.guidance_scale >= T::one() && self.guidance_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "guidance scale must be >= 1, got {}",
                self.guidance_scale
            )));
        }
        if !(self.recenter_lambda >= T::zero() && self.recenter_lambda <= T::one()) {
            return Err(Error::InvalidConfig(format!(
                "re-centering lambda must lie in [0, 1], got {}",
                self.recenter_lambda
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::InvalidConfig("patch size must be positive".into()));
        }
        if !(self.temperature_floor > T::zero()) {
            return Err(Error::InvalidConfig("temperature floor must be positive".into()));
        }
        if let TemperatureRule::Constant(tau) = self.temperature {
            if !(tau > T::zero() && tau.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "constant temperature must be positive, got {tau}"
                )));
            }
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > n_adapters {
                return Err(Error::KOutOfRange { k, n: n_adapters });
            }
        }
        if let Some(w) = &self.naive_weights {
            if w.len() != n_adapters {
                return Err(Error::InvalidConfig(format!(
                    "{} naive weights for {n_adapters} adapters",
                    w.len()
                )));
            }
        }
        Ok(())
    }

    /// Patch layout used for a grid of the given size.
    pub fn layout(&self, height: usize, width: usize) -> PatchLayout {
        if self.global_mode {
            PatchLayout::whole(height, width)
        } else {
            PatchLayout::square(self.patch_size)
        }
    }

    fn effective_lambda(&self) -> T {
        if self.global_mode {
            T::one()
        } else {
            self.recenter_lambda
        }
    }

    pub fn tau(&self, total_steps: usize, t: usize) -> T {
        let schedule = TemperatureSchedule {
            total_steps,
            rule: self.temperature,
        };
        adaptive_tau(&schedule, t).max(self.temperature_floor)
    }
}

fn check_shapes<T: Scalar>(reference: &LatentGrid<T>, others: &[&LatentGrid<T>]) -> Result<()> {
    others
        .iter()
        .try_for_each(|g| reference.ensure_same_shape(g))
}

/// Raw similarity matrix: cosine of each adapter's channel-averaged patch
/// against the base model's corresponding patch.
pub fn similarity_matrix<T: Scalar>(
    base_cond: &LatentGrid<T>,
    adapter_conds: &[&LatentGrid<T>],
    patch_size: usize,
) -> Result<WeightMatrix<T>> {
    similarity_matrix_with(base_cond, adapter_conds, PatchLayout::square(patch_size))
}

pub fn similarity_matrix_with<T: Scalar>(
    base_cond: &LatentGrid<T>,
    adapter_conds: &[&LatentGrid<T>],
    layout: PatchLayout,
) -> Result<WeightMatrix<T>> {
    check_shapes(base_cond, adapter_conds)?;
    let base_patches = patchify_with(&channel_mean(base_cond), layout)?;
    let p = base_patches.patch_count();
    let mut values = Vec::with_capacity(adapter_conds.len() * p);
    for grid in adapter_conds {
        let patches = patchify_with(&channel_mean(grid), layout)?;
        for (a, b) in patches.iter().zip(base_patches.iter()) {
            values.push(cosine_similarity(a, b)?);
        }
    }
    WeightMatrix::new(adapter_conds.len(), p, values)
}

/// Sum over adapters of upsampled weight map times prediction, skipping
/// adapters whose weights are all zero (`None` entries must have zero rows).
fn gated_sum<T: Scalar>(
    grids: &[Option<&LatentGrid<T>>],
    gated: &WeightMatrix<T>,
    layout: PatchLayout,
) -> Result<LatentGrid<T>> {
    let reference = grids
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::InvalidConfig("no adapter carries weight".into()))?;
    let shape = reference.shape();
    if grids.len() != gated.n_adapters() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} adapter predictions", gated.n_adapters()),
            found: format!("{}", grids.len()),
        });
    }
    let (rows, cols) = layout.grid_for(shape.height, shape.width)?;
    if rows * cols != gated.n_patches() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} patches", rows * cols),
            found: format!("{} patches", gated.n_patches()),
        });
    }
    let mut out = vec![T::zero(); shape.len()];
    for (i, grid) in grids.iter().enumerate() {
        let row = gated.row(i);
        if row.iter().all(|&w| w == T::zero()) {
            continue;
        }
        let grid = grid.ok_or_else(|| {
            Error::InvalidConfig(format!("adapter {i} has weight but no prediction"))
        })?;
        reference.ensure_same_shape(grid)?;
        let up = kron_upsample_with(&PlanarMap::from_raw(rows, cols, row.to_vec()), layout);
        for ((o, px), &w) in out
            .chunks_mut(shape.channels)
            .zip(grid.as_slice().chunks(shape.channels))
            .zip(up.as_slice())
        {
            for (oc, &v) in o.iter_mut().zip(px) {
                *oc = *oc + w * v;
            }
        }
    }
    Ok(LatentGrid::from_raw(shape, out))
}

/// Spatially gated conditional aggregate: `sum_i up(W_i) * eps_i(z, t, c)`.
pub fn compose_conditional<T: Scalar>(
    adapter_conds: &[&LatentGrid<T>],
    gated: &WeightMatrix<T>,
    patch_size: usize,
) -> Result<LatentGrid<T>> {
    compose_conditional_with(adapter_conds, gated, PatchLayout::square(patch_size))
}

pub fn compose_conditional_with<T: Scalar>(
    adapter_conds: &[&LatentGrid<T>],
    gated: &WeightMatrix<T>,
    layout: PatchLayout,
) -> Result<LatentGrid<T>> {
    let grids: Vec<_> = adapter_conds.iter().map(|g| Some(*g)).collect();
    gated_sum(&grids, gated, layout)
}

/// Re-centered unconditional score: `lambda * gated adapter aggregate + (1 - lambda) * base`.
pub fn compose_unconditional<T: Scalar>(
    base_uncond: &LatentGrid<T>,
    adapter_unconds: &[&LatentGrid<T>],
    gated: &WeightMatrix<T>,
    lambda: T,
    patch_size: usize,
) -> Result<LatentGrid<T>> {
    let grids: Vec<_> = adapter_unconds.iter().map(|g| Some(*g)).collect();
    recenter(
        Some(base_uncond),
        &grids,
        gated,
        lambda,
        PatchLayout::square(patch_size),
    )
}

fn recenter<T: Scalar>(
    base_uncond: Option<&LatentGrid<T>>,
    adapter_unconds: &[Option<&LatentGrid<T>>],
    gated: &WeightMatrix<T>,
    lambda: T,
    layout: PatchLayout,
) -> Result<LatentGrid<T>> {
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(Error::InvalidRange(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let missing_base = || Error::InvalidConfig("re-centering needs the base prediction".into());
    if lambda == T::zero() {
        return base_uncond.cloned().ok_or_else(missing_base);
    }
    let aggregate = gated_sum(adapter_unconds, gated, layout)?;
    if lambda == T::one() {
        return Ok(aggregate);
    }
    let base = base_uncond.ok_or_else(missing_base)?;
    aggregate.zip_with(base, |a, b| lambda * a + (T::one() - lambda) * b)
}

/// Classifier-free guidance: `uncond + s * (cond - uncond)`.
pub fn guided_score<T: Scalar>(
    cond: &LatentGrid<T>,
    uncond: &LatentGrid<T>,
    scale: T,
) -> Result<LatentGrid<T>> {
    uncond.ensure_same_shape(cond)?;
    if scale == T::one() {
        return Ok(cond.clone());
    }
    uncond.zip_with(cond, |u, c| u + scale * (c - u))
}

/// Weighted average of per-adapter guided scores (the unweighted-merge baseline).
pub fn naive_compose<T: Scalar>(
    adapter_conds: &[&LatentGrid<T>],
    adapter_unconds: &[&LatentGrid<T>],
    weights: &[T],
    scale: T,
) -> Result<LatentGrid<T>> {
    let n = adapter_conds.len();
    if n == 0 {
        return Err(Error::InvalidConfig("naive composition needs an adapter".into()));
    }
    if adapter_unconds.len() != n || weights.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} unconditional predictions and weights"),
            found: format!("{} and {}", adapter_unconds.len(), weights.len()),
        });
    }
    let reference = adapter_conds[0];
    check_shapes(reference, adapter_conds)?;
    check_shapes(reference, adapter_unconds)?;
    let inv_n = T::one() / T::of(n as f64);
    let mut out = vec![T::zero(); reference.shape().len()];
    for ((c, u), &w) in adapter_conds.iter().zip(adapter_unconds).zip(weights) {
        for ((o, &ci), &ui) in out.iter_mut().zip(c.as_slice()).zip(u.as_slice()) {
            *o = *o + w * (ui + scale * (ci - ui));
        }
    }
    Ok(LatentGrid::from_raw(
        reference.shape(),
        out.into_iter().map(|v| v * inv_n).collect(),
    ))
}

/// Guided noise estimate plus the similarity and gated weight matrices of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub eps: LatentGrid<T>,
    pub omega_raw: Option<WeightMatrix<T>>,
    pub omega_gated: Option<WeightMatrix<T>>,
}

/// One full gated composition step for condition `c` at timestep `t`.
pub fn compose_step<T: Scalar>(
    base: &dyn ScoreModel<T>,
    adapters: &[&dyn ScoreModel<T>],
    z: &LatentGrid<T>,
    t: usize,
    c: ConditionId,
    cfg: &GuidanceConfig<T>,
) -> Result<StepOutput<T>> {
    if adapters.is_empty() {
        return Err(Error::InvalidConfig("gated composition needs an adapter".into()));
    }
    cfg.validate(adapters.len())?;
    let layout = cfg.layout(z.height(), z.width());
    let lambda = cfg.effective_lambda();

    let base_cond = base.predict_noise(z, t, Some(c))?;
    let conds = adapters
        .iter()
        .map(|a| a.predict_noise(z, t, Some(c)))
        .collect::<Result<Vec<_>>>()?;
    let cond_refs: Vec<&LatentGrid<T>> = conds.iter().collect();

    let omega_raw = similarity_matrix_with(&base_cond, &cond_refs, layout)?;
    let masked = match cfg.top_k {
        Some(k) => topk_mask_scoped(&omega_raw, k, cfg.top_k_scope)?,
        None => omega_raw.clone(),
    };
    let tau = cfg.tau(base.schedule().total_steps(), t);
    let gated = softmin_gate(&masked, tau)?;

    let cond_agg = compose_conditional_with(&cond_refs, &gated, layout)?;

    // With s = 1 the guided estimate is the conditional aggregate itself.
    if cfg.guidance_scale == T::one() {
        return Ok(StepOutput {
            eps: cond_agg,
            omega_raw: Some(omega_raw),
            omega_gated: Some(gated),
        });
    }

    let base_uncond = if lambda < T::one() {
        Some(base.predict_noise(z, t, None)?)
    } else {
        None
    };
    let unconds = if lambda > T::zero() {
        adapters
            .iter()
            .enumerate()
            .map(|(i, a)| {
                if gated.row(i).iter().all(|&w| w == T::zero()) {
                    Ok(None)
                } else {
                    a.predict_noise(z, t, None).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![None; adapters.len()]
    };
    let uncond_refs: Vec<Option<&LatentGrid<T>>> = unconds.iter().map(Option::as_ref).collect();
    let uncond_agg = recenter(base_uncond.as_ref(), &uncond_refs, &gated, lambda, layout)?;

    let eps = guided_score(&cond_agg, &uncond_agg, cfg.guidance_scale)?;
    Ok(StepOutput {
        eps,
        omega_raw: Some(omega_raw),
        omega_gated: Some(gated),
    })
}

/// Plain classifier-free guidance of a single model.
pub fn cfg_step<T: Scalar>(
    model: &dyn ScoreModel<T>,
    z: &LatentGrid<T>,
    t: usize,
    c: ConditionId,
    scale: T,
) -> Result<LatentGrid<T>> {
    let cond = model.predict_noise(z, t, Some(c))?;
    if scale == T::one() {
        return Ok(cond);
    }
    let uncond = model.predict_noise(z, t, None)?;
    guided_score(&cond, &uncond, scale)
}

/// Naive composition step over all adapters.
pub fn naive_step<T: Scalar>(
    adapters: &[&dyn ScoreModel<T>],
    z: &LatentGrid<T>,
    t: usize,
    c: ConditionId,
    cfg: &GuidanceConfig<T>,
) -> Result<LatentGrid<T>> {
    cfg.validate(adapters.len())?;
    let conds = adapters
        .iter()
        .map(|a| a.predict_noise(z, t, Some(c)))
        .collect::<Result<Vec<_>>>()?;
    let unconds = adapters
        .iter()
        .map(|a| a.predict_noise(z, t, None))
        .collect::<Result<Vec<_>>>()?;
    let ones;
    let weights = match &cfg.naive_weights {
        Some(w) => w.as_slice(),
        None => {
            ones = vec![T::one(); adapters.len()];
            &ones
        }
    };
    naive_compose(
        &conds.iter().collect::<Vec<_>>(),
        &unconds.iter().collect::<Vec<_>>(),
        weights,
        cfg.guidance_scale,
    )
}

/// How the per-step noise estimate is assembled from the loaded models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompositionMethod {
    /// Plain guidance of the base model; adapters are ignored.
    BaseOnly,
    /// Average of per-adapter guided scores.
    Naive,
    /// Similarity-gated composition with re-centered guidance.
    Gated,
}

pub fn predict_step<T: Scalar>(
    method: CompositionMethod,
    base: &dyn ScoreModel<T>,
    adapters: &[&dyn ScoreModel<T>],
    z: &LatentGrid<T>,
    t: usize,
    c: ConditionId,
    cfg: &GuidanceConfig<T>,
) -> Result<StepOutput<T>> {
    match method {
        CompositionMethod::BaseOnly => Ok(StepOutput {
            eps: cfg_step(base, z, t, c, cfg.guidance_scale)?,
            omega_raw: None,
            omega_gated: None,
        }),
        CompositionMethod::Naive => Ok(StepOutput {
            eps: naive_step(adapters, z, t, c, cfg)?,
            omega_raw: None,
            omega_gated: None,
        }),
        CompositionMethod::Gated => compose_step(base, adapters, z, t, c, cfg),
    }
}
