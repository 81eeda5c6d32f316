use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batcher::KeyedJagged;
use crate::schema::FeatureId;
use crate::tensor::Matrix;

use super::{Counters, ModelError};

/// Seeded id -> vector table. Row 0 is all zeros and serves padding;
/// `id` maps to row `id % num_rows`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub num_rows: u32,
    pub dim: u32,
    pub seed: u64,
    pub weights: Matrix,
}

impl EmbeddingTable {
    pub fn new(num_rows: u32, dim: u32, seed: u64) -> Self {
        assert!(num_rows >= 1 && dim >= 1, "empty embedding table");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f32).sqrt();
        let mut weights = Matrix::zeros(num_rows as usize, dim as usize);
        for r in 1..num_rows as usize {
            for x in weights.row_mut(r) {
                *x = rng.gen_range(-bound..bound);
            }
        }
        Self {
            num_rows,
            dim,
            seed,
            weights,
        }
    }

    pub fn row(&self, id: u64) -> &[f32] {
        self.weights.row((id % self.num_rows as u64) as usize)
    }

    /// Sum of the rows of `ids`, accumulated in list order.
    pub fn pool(&self, ids: &[u64]) -> Vec<f32> {
        let mut out = vec![0.0f32; self.dim as usize];
        for &id in ids {
            for (o, &w) in out.iter_mut().zip(self.row(id)) {
                *o += w;
            }
        }
        out
    }
}

/// Sum-pooled lookup of one id-list feature over every row of `jagged`.
/// Counts every id as one fetched row.
pub fn lookup_pooled(
    table: &EmbeddingTable,
    jagged: &KeyedJagged,
    feature: FeatureId,
    ro_side: bool,
    counters: &mut Counters,
) -> Result<Matrix, ModelError> {
    let k = jagged.key_index(feature).ok_or(ModelError::UnknownFeature(feature))?;
    let rows = jagged.num_rows();
    let mut out = Matrix::zeros(rows, table.dim as usize);
    for r in 0..rows {
        let pooled = table.pool(jagged.row(k, r));
        out.row_mut(r).copy_from_slice(&pooled);
    }
    counters.record_fetch(feature, ro_side, jagged.total_ids(k) as u64, table.dim);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = EmbeddingTable::new(16, 4, 7);
        let b = EmbeddingTable::new(16, 4, 7);
        let c = EmbeddingTable::new(16, 4, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.row(0).iter().all(|&x| x == 0.0));
        assert!(a.weights.data().iter().all(|x| x.abs() <= 0.5));
        assert_eq!(a.row(17), a.row(1));
    }

    #[test]
    fn padding_only_row_pools_to_zero() {
        let t = EmbeddingTable::new(8, 3, 1);
        assert_eq!(t.pool(&[0]), vec![0.0; 3]);
        assert_eq!(t.pool(&[]), vec![0.0; 3]);
    }
}
