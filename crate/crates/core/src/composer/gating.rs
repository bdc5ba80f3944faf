//! Similarity gating: softmin over adapters, top-k masking, temperature rules.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `N x P` matrix of per-adapter, per-patch values stored row-major
/// (one row per adapter).
///
/// Holds raw cosine similarities, top-k masked similarities (excluded
/// entries are `+inf`) or gated weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix<T> {
    n_adapters: usize,
    n_patches: usize,
    values: Vec<T>,
}

impl<T: Scalar> WeightMatrix<T> {
    pub fn new(n_adapters: usize, n_patches: usize, values: Vec<T>) -> Result<Self> {
        if n_adapters == 0 || n_patches == 0 {
            return Err(Error::InvalidRange("weight matrix needs N, P >= 1".into()));
        }
        if values.len() != n_adapters * n_patches {
            return Err(Error::ShapeMismatch {
                expected: format!("{n_adapters}x{n_patches} values"),
                found: format!("{} values", values.len()),
            });
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("weight matrix"));
        }
        Ok(Self {
            n_adapters,
            n_patches,
            values,
        })
    }

    pub fn n_adapters(&self) -> usize {
        self.n_adapters
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn get(&self, adapter: usize, patch: usize) -> T {
        self.values[adapter * self.n_patches + patch]
    }

    pub fn row(&self, adapter: usize) -> &[T] {
        &self.values[adapter * self.n_patches..(adapter + 1) * self.n_patches]
    }

    pub fn column(&self, patch: usize) -> Vec<T> {
        (0..self.n_adapters).map(|i| self.get(i, patch)).collect()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    /// Mean of each row over patches.
    pub fn row_means(&self) -> Vec<T> {
        let p = T::of(self.n_patches as f64);
        (0..self.n_adapters)
            .map(|i| self.row(i).iter().copied().sum::<T>() / p)
            .collect()
    }

    fn map_columns(&self, mut f: impl FnMut(&[T]) -> Result<Vec<T>>) -> Result<Self> {
        let mut values = vec![T::zero(); self.values.len()];
        for p in 0..self.n_patches {
            let col = f(&self.column(p))?;
            for (i, v) in col.into_iter().enumerate() {
                values[i * self.n_patches + p] = v;
            }
        }
        Ok(Self {
            values,
            ..*self
        })
    }
}

/// Temperature-scaled softmin along the adapter axis of every patch column.
///
/// Entries equal to `+inf` (the top-k sentinel) receive weight exactly 0.
pub fn softmin_gate<T: Scalar>(omega: &WeightMatrix<T>, tau: T) -> Result<WeightMatrix<T>> {
    if !(tau > T::zero()) {
        return Err(Error::InvalidRange(format!("temperature must be positive, got {tau}")));
    }
    omega.map_columns(|col| softmin(col, tau))
}

fn softmin<T: Scalar>(col: &[T], tau: T) -> Result<Vec<T>> {
    let min = col
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(T::infinity(), T::min);
    if !min.is_finite() {
        return Err(Error::InvalidRange("patch column has no active adapter".into()));
    }
    let exps: Vec<T> = col
        .iter()
        .map(|&v| {
            if v.is_finite() {
                (-(v - min) / tau).exp()
            } else {
                T::zero()
            }
        })
        .collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Where the top-k selection is made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TopKScope {
    /// Independently for every patch column.
    #[default]
    PerPatch,
    /// Once per image, ranking adapters by their mean similarity over patches.
    WholeImage,
}

/// Keeps the `k` least-similar adapters of each column; the rest become `+inf`.
///
/// Ties are broken toward the lower adapter index.
pub fn topk_mask<T: Scalar>(omega: &WeightMatrix<T>, k: usize) -> Result<WeightMatrix<T>> {
    topk_mask_scoped(omega, k, TopKScope::PerPatch)
}

pub fn topk_mask_scoped<T: Scalar>(
    omega: &WeightMatrix<T>,
    k: usize,
    scope: TopKScope,
) -> Result<WeightMatrix<T>> {
    let n = omega.n_adapters();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    if k == n {
        return Ok(omega.clone());
    }
    match scope {
        TopKScope::PerPatch => omega.map_columns(|col| {
            let keep = smallest_k(col, k);
            Ok(col
                .iter()
                .enumerate()
                .map(|(i, &v)| if keep[i] { v } else { T::infinity() })
                .collect())
        }),
        TopKScope::WholeImage => {
            let keep = smallest_k(&omega.row_means(), k);
            omega.map_columns(|col| {
                Ok(col
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if keep[i] { v } else { T::infinity() })
                    .collect())
            })
        }
    }
}

fn smallest_k<T: Scalar>(values: &[T], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Stable sort keeps lower indices first among equal values.
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("no NaN in similarities"));
    let mut keep = vec![false; values.len()];
    for &i in &order[..k] {
        keep[i] = true;
    }
    keep
}

/// How the softmin temperature evolves over the reverse process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TemperatureRule<T> {
    /// `tau = 1 / (max(1, T - t) * 10)`: soft early, sharp late.
    Adaptive,
    Constant(T),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSchedule<T> {
    pub total_steps: usize,
    pub rule: TemperatureRule<T>,
}

impl<T: Scalar> TemperatureSchedule<T> {
    pub fn new(total_steps: usize, rule: TemperatureRule<T>) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidRange("temperature schedule needs T >= 1".into()));
        }
        if let TemperatureRule::Constant(tau) = rule {
            if !(tau > T::zero() && tau.is_finite()) {
                return Err(Error::InvalidRange(format!(
                    "constant temperature must be positive, got {tau}"
                )));
            }
        }
        Ok(Self { total_steps, rule })
    }

    pub fn tau(&self, t: usize) -> T {
        adaptive_tau(self, t)
    }
}

pub fn adaptive_tau<T: Scalar>(schedule: &TemperatureSchedule<T>, t: usize) -> T {
    match schedule.rule {
        TemperatureRule::Adaptive => {
            let remaining = schedule.total_steps.saturating_sub(t).max(1);
            T::one() / (T::of(remaining as f64) * T::of(10.0))
        }
        TemperatureRule::Constant(tau) => tau,
    }
}
