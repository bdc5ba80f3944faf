use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::{check_inputs, ConditionId, ScoreModel};
use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};
use crate::schedule::NoiseSchedule;
use crate::tensor::{GridShape, LatentGrid};

/// Per-condition feature vectors in latent coordinates, shared by a set of adapters.
pub type ConditionEmbeddings<T> = BTreeMap<ConditionId, Vec<T>>;

/// Timestep-dependent gains on the adapter's two input paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Modulation<T> {
    /// Both gains are 1: the delta is exactly `U V^T (z + e_c)`.
    Unit,
    /// Gains chosen so that base plus delta is the exact denoiser of a
    /// Gaussian whose variance along span(V) is `target_variance` (instead of
    /// `base_variance`) and whose mean along span(V) is the projection of the
    /// condition embedding. Exact when U = V is orthonormal, strength is 1 and
    /// the base mean has no component in span(V).
    Retarget { base_variance: T, target_variance: T },
}

impl<T: Scalar> Modulation<T> {
    /// `(latent_gain, condition_gain)` at cumulative retention `ab`.
    fn gains(&self, ab: T) -> (T, T) {
        match *self {
            Modulation::Unit => (T::one(), T::one()),
            Modulation::Retarget {
                base_variance,
                target_variance,
            } => {
                let noise = (T::one() - ab).sqrt();
                let d_base = ab * base_variance + T::one() - ab;
                let d_target = ab * target_variance + T::one() - ab;
                (
                    noise * (T::one() / d_target - T::one() / d_base),
                    -noise * ab.sqrt() / d_target,
                )
            }
        }
    }
}

/// Linear low-rank adapter on top of a base score model.
///
/// The adapter reads the input feature `x = z + e_c` (with `e_c` the
/// condition embedding, zero when absent or unconditional) through the down
/// map `V` and writes through the up map `U`:
///
/// `eps_adapter = eps_base + strength * gate(c) * U (V^T (a_t z + b_t e_c))`
///
/// where `(a_t, b_t)` come from the [`Modulation`]. The gate is 1 for
/// unconditional calls and trained conditions, `ood_decay` otherwise. Inputs
/// orthogonal to span(V) leave the base prediction untouched.
#[derive(Clone)]
pub struct LowRankAdapter<T: Scalar> {
    base: Arc<dyn ScoreModel<T>>,
    down: Vec<Vec<T>>,
    up: Vec<Vec<T>>,
    strength: T,
    trained: BTreeSet<ConditionId>,
    ood_decay: T,
    modulation: Modulation<T>,
    embeddings: Option<Arc<ConditionEmbeddings<T>>>,
}

impl<T: Scalar> std::fmt::Debug for LowRankAdapter<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LowRankAdapter")
            .field("rank", &self.rank())
            .field("strength", &self.strength)
            .field("trained", &self.trained)
            .field("ood_decay", &self.ood_decay)
            .field("modulation", &self.modulation)
            .finish_non_exhaustive()
    }
}

/// Default adapter strength.
pub const DEFAULT_STRENGTH: f64 = 0.8;

impl<T: Scalar> LowRankAdapter<T> {
    /// `down` and `up` hold the `r` columns of `V` and `U`, each of latent length.
    pub fn new(base: Arc<dyn ScoreModel<T>>, down: Vec<Vec<T>>, up: Vec<Vec<T>>) -> Result<Self> {
        let dim = base.shape().len();
        if down.is_empty() || down.len() != up.len() {
            return Err(Error::InvalidConfig(format!(
                "down and up maps need the same positive rank, got {} and {}",
                down.len(),
                up.len()
            )));
        }
        if down.len() > dim {
            return Err(Error::InvalidRange(format!(
                "rank {} exceeds latent dimension {dim}",
                down.len()
            )));
        }
        for col in down.iter().chain(&up) {
            if col.len() != dim {
                return Err(Error::ShapeMismatch {
                    expected: format!("columns of length {dim}"),
                    found: format!("length {}", col.len()),
                });
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("adapter map"));
            }
        }
        Ok(Self {
            base,
            down,
            up,
            strength: T::of(DEFAULT_STRENGTH),
            trained: BTreeSet::new(),
            ood_decay: T::zero(),
            modulation: Modulation::Unit,
            embeddings: None,
        })
    }

    /// Adapter with `U = V` built from orthonormalized `directions`.
    pub fn symmetric(base: Arc<dyn ScoreModel<T>>, directions: Vec<Vec<T>>) -> Result<Self> {
        let basis = orthonormalize(directions)?;
        Self::new(base, basis.clone(), basis)
    }

    pub fn with_strength(mut self, strength: T) -> Result<Self> {
        if !(strength >= T::zero() && strength <= T::one()) {
            return Err(Error::InvalidRange(format!(
                "strength must lie in [0, 1], got {strength}"
            )));
        }
        self.strength = strength;
        Ok(self)
    }

    pub fn with_trained_conditions(mut self, conditions: impl IntoIterator<Item = ConditionId>) -> Self {
        self.trained = conditions.into_iter().collect();
        self
    }

    pub fn with_ood_decay(mut self, decay: T) -> Result<Self> {
        if !(decay >= T::zero() && decay <= T::one()) {
            return Err(Error::InvalidRange(format!(
                "ood decay must lie in [0, 1], got {decay}"
            )));
        }
        self.ood_decay = decay;
        Ok(self)
    }

    pub fn with_modulation(mut self, modulation: Modulation<T>) -> Result<Self> {
        if let Modulation::Retarget {
            base_variance,
            target_variance,
        } = modulation
        {
            if !(base_variance > T::zero() && target_variance > T::zero()) {
                return Err(Error::InvalidRange("retarget variances must be positive".into()));
            }
        }
        self.modulation = modulation;
        Ok(self)
    }

    pub fn with_embeddings(mut self, embeddings: Arc<ConditionEmbeddings<T>>) -> Result<Self> {
        let dim = self.base.shape().len();
        if let Some((c, e)) = embeddings.iter().find(|(_, e)| e.len() != dim) {
            return Err(Error::ShapeMismatch {
                expected: format!("embedding of length {dim}"),
                found: format!("length {} for {c}", e.len()),
            });
        }
        self.embeddings = Some(embeddings);
        Ok(self)
    }

    pub fn rank(&self) -> usize {
        self.down.len()
    }

    pub fn strength(&self) -> T {
        self.strength
    }

    pub fn down_map(&self) -> &[Vec<T>] {
        &self.down
    }

    pub fn up_map(&self) -> &[Vec<T>] {
        &self.up
    }

    pub fn trained_conditions(&self) -> &BTreeSet<ConditionId> {
        &self.trained
    }

    pub fn base(&self) -> &Arc<dyn ScoreModel<T>> {
        &self.base
    }

    fn gate(&self, condition: Option<ConditionId>) -> T {
        match condition {
            None => T::one(),
            Some(c) if self.trained.contains(&c) => T::one(),
            Some(_) => self.ood_decay,
        }
    }

    /// The additive correction at the given strength, or `None` when it is exactly zero.
    pub fn delta_at_strength(
        &self,
        z: &LatentGrid<T>,
        t: usize,
        condition: Option<ConditionId>,
        strength: T,
    ) -> Result<Option<Vec<T>>> {
        let scale = strength * self.gate(condition);
        if scale == T::zero() {
            return Ok(None);
        }
        let ab = self.base.schedule().alpha_bar(t)?;
        let (latent_gain, condition_gain) = self.modulation.gains(ab);
        let embedding = condition
            .and_then(|c| self.embeddings.as_ref().and_then(|e| e.get(&c)));
        let coeffs: Vec<T> = self
            .down
            .iter()
            .map(|v| {
                let mut y = latent_gain * dot(v, z.as_slice());
                if let Some(e) = embedding {
                    y = y + condition_gain * dot(v, e);
                }
                scale * y
            })
            .collect();
        if coeffs.iter().all(|&y| y == T::zero()) {
            return Ok(None);
        }
        let mut delta = vec![T::zero(); z.as_slice().len()];
        for (u, &y) in self.up.iter().zip(&coeffs) {
            for (d, &ui) in delta.iter_mut().zip(u) {
                *d = *d + y * ui;
            }
        }
        Ok(Some(delta))
    }

    pub fn delta(
        &self,
        z: &LatentGrid<T>,
        t: usize,
        condition: Option<ConditionId>,
    ) -> Result<Option<Vec<T>>> {
        self.delta_at_strength(z, t, condition, self.strength)
    }
}

fn add_in_place<T: Scalar>(grid: LatentGrid<T>, delta: &[T]) -> LatentGrid<T> {
    let shape = grid.shape();
    let mut data = grid.into_vec();
    for (v, &d) in data.iter_mut().zip(delta) {
        *v = *v + d;
    }
    LatentGrid::from_raw(shape, data)
}

impl<T: Scalar> ScoreModel<T> for LowRankAdapter<T> {
    fn shape(&self) -> GridShape {
        self.base.shape()
    }

    fn schedule(&self) -> &NoiseSchedule<T> {
        self.base.schedule()
    }

    fn predict_noise(
        &self,
        z: &LatentGrid<T>,
        t: usize,
        condition: Option<ConditionId>,
    ) -> Result<LatentGrid<T>> {
        check_inputs(self.shape(), self.schedule(), z, t)?;
        let base = self.base.predict_noise(z, t, condition)?;
        Ok(match self.delta(z, t, condition)? {
            Some(delta) => add_in_place(base, &delta),
            None => base,
        })
    }
}

/// Weight-merge analogue: one model carrying every adapter's delta at once.
#[derive(Clone, Debug)]
pub struct MergedAdapters<T: Scalar> {
    adapters: Vec<LowRankAdapter<T>>,
    strength: Option<T>,
}

impl<T: Scalar> MergedAdapters<T> {
    /// Merges adapters sharing one base; `strength` overrides each adapter's own.
    pub fn new(adapters: Vec<LowRankAdapter<T>>, strength: Option<T>) -> Result<Self> {
        let first = adapters
            .first()
            .ok_or_else(|| Error::InvalidConfig("merge needs at least one adapter".into()))?;
        if adapters.iter().any(|a| !Arc::ptr_eq(a.base(), first.base())) {
            return Err(Error::InvalidConfig("merged adapters must share a base".into()));
        }
        Ok(Self { adapters, strength })
    }
}

impl<T: Scalar> ScoreModel<T> for MergedAdapters<T> {
    fn shape(&self) -> GridShape {
        self.adapters[0].shape()
    }

    fn schedule(&self) -> &NoiseSchedule<T> {
        self.adapters[0].schedule()
    }

    fn predict_noise(
        &self,
        z: &LatentGrid<T>,
        t: usize,
        condition: Option<ConditionId>,
    ) -> Result<LatentGrid<T>> {
        check_inputs(self.shape(), self.schedule(), z, t)?;
        let mut out = self.adapters[0].base().predict_noise(z, t, condition)?;
        for adapter in &self.adapters {
            let strength = self.strength.unwrap_or(adapter.strength());
            if let Some(delta) = adapter.delta_at_strength(z, t, condition, strength)? {
                out = add_in_place(out, &delta);
            }
        }
        Ok(out)
    }
}

/// Modified Gram-Schmidt; rejects (near-)dependent directions.
pub(crate) fn orthonormalize<T: Scalar>(directions: Vec<Vec<T>>) -> Result<Vec<Vec<T>>> {
    let mut basis: Vec<Vec<T>> = Vec::with_capacity(directions.len());
    for mut v in directions {
        for b in &basis {
            let proj = dot(&v, b);
            for (vi, &bi) in v.iter_mut().zip(b) {
                *vi = *vi - proj * bi;
            }
        }
        let n = dot(&v, &v).sqrt();
        if !(n > T::of(1e-10)) {
            return Err(Error::InvalidConfig(
                "adapter directions are linearly dependent or zero".into(),
            ));
        }
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
    Ok(basis)
}
