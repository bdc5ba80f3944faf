use super::{ConditionId, ScoreModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{cosine_similarity, LatentGrid};

/// Mean whole-grid cosine similarity between adapter and base predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTable<T> {
    pub conditions: Vec<ConditionId>,
    /// `conditional[i][j]`: adapter `i` against base under `conditions[j]`.
    pub conditional: Vec<Vec<T>>,
    /// `unconditional[i]`: adapter `i` against base without a condition.
    pub unconditional: Vec<T>,
}

pub fn similarity_probe<T: Scalar>(
    base: &dyn ScoreModel<T>,
    adapters: &[&dyn ScoreModel<T>],
    conditions: &[ConditionId],
    z_samples: &[LatentGrid<T>],
    t: usize,
) -> Result<SimilarityTable<T>> {
    if z_samples.is_empty() {
        return Err(Error::InvalidConfig("similarity probe needs at least one latent".into()));
    }
    let n = T::of(z_samples.len() as f64);
    let mut columns: Vec<Option<ConditionId>> = conditions.iter().copied().map(Some).collect();
    columns.push(None);

    let mut sums = vec![vec![T::zero(); columns.len()]; adapters.len()];
    for z in z_samples {
        for (j, &c) in columns.iter().enumerate() {
            let reference = base.predict_noise(z, t, c)?;
            for (i, adapter) in adapters.iter().enumerate() {
                let eps = adapter.predict_noise(z, t, c)?;
                sums[i][j] = sums[i][j] + cosine_similarity(eps.as_slice(), reference.as_slice())?;
            }
        }
    }

    let mut conditional = Vec::with_capacity(adapters.len());
    let mut unconditional = Vec::with_capacity(adapters.len());
    for mut row in sums {
        let uncond = row.pop().expect("unconditional column");
        unconditional.push(uncond / n);
        conditional.push(row.into_iter().map(|s| s / n).collect());
    }
    Ok(SimilarityTable {
        conditions: conditions.to_vec(),
        conditional,
        unconditional,
    })
}
