//! Moment-based fidelity of sample sets against a Gaussian reference.

use loracomp::{ConditionId, GaussianScoreModel, LatentGrid};

/// Below this norm the reference mean counts as zero and the mean error is absolute.
pub const MEAN_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("moment metrics need at least 2 samples, got {found}")]
    InsufficientSamples { found: usize },
    #[error(transparent)]
    Engine(#[from] loracomp::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentMetrics {
    /// `|mean - mu| / |mu|`.
    pub mean_error: f64,
    /// `|cov - s^2 I|_F / |s^2 I|_F` with the unbiased sample covariance.
    pub cov_error: f64,
}

pub fn moment_metrics(
    samples: &[LatentGrid<f64>],
    target: &GaussianScoreModel<f64>,
    condition: ConditionId,
) -> Result<MomentMetrics, MetricsError> {
    let comp = target.component(condition)?;
    moments_against(samples, &comp.mean, comp.variance)
}

/// Same metrics against an explicit mean and isotropic variance.
pub fn moments_against(
    samples: &[LatentGrid<f64>],
    mean: &[f64],
    variance: f64,
) -> Result<MomentMetrics, MetricsError> {
    let n = samples.len();
    if n < 2 {
        return Err(MetricsError::InsufficientSamples { found: n });
    }
    let dim = mean.len();
    for s in samples {
        if s.as_slice().len() != dim {
            return Err(loracomp::Error::ShapeMismatch {
                expected: format!("samples of length {dim}"),
                found: format!("length {}", s.as_slice().len()),
            }
            .into());
        }
    }

    let mut avg = vec![0.0; dim];
    for s in samples {
        for (a, &v) in avg.iter_mut().zip(s.as_slice()) {
            *a += v;
        }
    }
    avg.iter_mut().for_each(|a| *a /= n as f64);

    let diff: f64 = avg
        .iter()
        .zip(mean)
        .map(|(a, m)| (a - m) * (a - m))
        .sum::<f64>()
        .sqrt();
    let mu_norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
    let mean_error = if mu_norm < MEAN_NORM_FLOOR {
        diff
    } else {
        diff / mu_norm
    };

    // Upper triangle of the scatter matrix, then the Frobenius distance to s^2 I.
    let mut scatter = vec![0.0; dim * dim];
    let mut centered = vec![0.0; dim];
    for s in samples {
        for ((c, &v), &a) in centered.iter_mut().zip(s.as_slice()).zip(&avg) {
            *c = v - a;
        }
        for i in 0..dim {
            let ci = centered[i];
            let row = &mut scatter[i * dim..(i + 1) * dim];
            for j in i..dim {
                row[j] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    let mut sq = 0.0;
    for i in 0..dim {
        for j in i..dim {
            let c = scatter[i * dim + j] / denom;
            let d = if i == j { c - variance } else { c };
            sq += if i == j { d * d } else { 2.0 * d * d };
        }
    }
    let cov_error = sq.sqrt() / (variance * (dim as f64).sqrt());
    Ok(MomentMetrics {
        mean_error,
        cov_error,
    })
}
