//! Linear Compress Embedding.
//!
//! Stage one mixes the `n_in` stacked user-feature embeddings down to
//! `n_out` (a matmul over the feature axis, one row per (sample, embedding
//! coordinate)); stage two projects every compressed embedding from `d_in`
//! to `d_out`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{vec_mat, Matrix};

use super::{uniform_matrix, uniform_vec, Counters, ModelError};

/// Dense `[d0 x d1 x d2]` tensor, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        self.data[(i * self.dims[1] + j) * self.dims[2] + k] = v;
    }

    /// Flattens dims 1 and 2 into one row per leading index.
    pub fn flatten_rows(&self) -> Matrix {
        Matrix::from_vec(self.dims[0], self.dims[1] * self.dims[2], self.data.clone())
    }

    /// Stacks per-feature `[B x d]` matrices into `[B x d x n]`.
    pub fn stack_features(features: &[Matrix]) -> Result<Self, ModelError> {
        let (b, d) = features
            .first()
            .map(Matrix::shape)
            .ok_or_else(|| ModelError::Shape("no user features to stack".into()))?;
        if features.iter().any(|m| m.shape() != (b, d)) {
            return Err(ModelError::Shape("user feature embeddings differ in shape".into()));
        }
        let n = features.len();
        let mut x = Tensor3::zeros([b, d, n]);
        for (f, m) in features.iter().enumerate() {
            for r in 0..b {
                for (c, &v) in m.row(r).iter().enumerate() {
                    x.set(r, c, f, v);
                }
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LceParams {
    pub n_in: usize,
    pub n_out: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// `[n_in x n_out]`
    pub w: Matrix,
    /// `[n_out]`
    pub b: Vec<f32>,
    /// `[d_in x d_out]`
    pub w_proj: Matrix,
    /// `[d_out]`
    pub b_proj: Vec<f32>,
}

impl LceParams {
    pub fn init(n_in: usize, n_out: usize, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            n_in,
            n_out,
            d_in,
            d_out,
            w: uniform_matrix(rng, n_in, n_out),
            b: uniform_vec(rng, n_out, n_in),
            w_proj: uniform_matrix(rng, d_in, d_out),
            b_proj: uniform_vec(rng, d_out, d_in),
        }
    }

    fn check(&self) -> Result<(), ModelError> {
        let ok = self.w.shape() == (self.n_in, self.n_out)
            && self.b.len() == self.n_out
            && self.w_proj.shape() == (self.d_in, self.d_out)
            && self.b_proj.len() == self.d_out;
        if ok {
            Ok(())
        } else {
            Err(ModelError::Shape("LCE parameter shapes disagree with dims".into()))
        }
    }
}

/// `[B x d_in x n_in] -> [B x d_in x n_out]`: `b + g(X) W` with `g(X)` the
/// `[B*d_in x n_in]` view of `X`.
pub fn lce_compress(x: &Tensor3, p: &LceParams, counters: &mut Counters) -> Result<Tensor3, ModelError> {
    p.check()?;
    let [b, d_in, n_in] = x.dims;
    if d_in != p.d_in || n_in != p.n_in {
        return Err(ModelError::Shape(format!(
            "LCE compress expects [B x {} x {}], got {:?}",
            p.d_in, p.n_in, x.dims
        )));
    }
    let mut out = Tensor3::zeros([b, d_in, p.n_out]);
    for row in 0..b * d_in {
        let input = &x.data[row * n_in..(row + 1) * n_in];
        let y = vec_mat(input, &p.w, Some(&p.b));
        out.data[row * p.n_out..(row + 1) * p.n_out].copy_from_slice(&y);
    }
    counters.ro_flops += 2 * (b * d_in * n_in * p.n_out) as u64;
    Ok(out)
}

/// `[B x d_in x n_out] -> [B x n_out x d_out]`: `b' + g'(Y) W'` with `g'(Y)`
/// the `[B*n_out x d_in]` permutation of `Y`.
pub fn lce_project(y: &Tensor3, p: &LceParams, counters: &mut Counters) -> Result<Tensor3, ModelError> {
    p.check()?;
    let [b, d_in, n_out] = y.dims;
    if d_in != p.d_in || n_out != p.n_out {
        return Err(ModelError::Shape(format!(
            "LCE project expects [B x {} x {}], got {:?}",
            p.d_in, p.n_out, y.dims
        )));
    }
    let mut out = Tensor3::zeros([b, n_out, p.d_out]);
    let mut column = vec![0.0f32; d_in];
    for s in 0..b {
        for o in 0..n_out {
            for (c, v) in column.iter_mut().enumerate() {
                *v = y.get(s, c, o);
            }
            let z = vec_mat(&column, &p.w_proj, Some(&p.b_proj));
            for (k, v) in z.into_iter().enumerate() {
                out.set(s, o, k, v);
            }
        }
    }
    counters.ro_flops += 2 * (b * n_out * d_in * p.d_out) as u64;
    Ok(out)
}

/// User-side architecture: compress then project the stacked RO
/// embeddings. Runs once per request row.
pub fn user_arch_forward(x: &Tensor3, p: &LceParams, counters: &mut Counters) -> Result<Tensor3, ModelError> {
    let y = lce_compress(x, p, counters)?;
    lce_project(&y, p, counters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(n_in: usize, n_out: usize, d_in: usize, d_out: usize) -> LceParams {
        LceParams::init(n_in, n_out, d_in, d_out, &mut ChaCha8Rng::seed_from_u64(3))
    }

    fn random_x(dims: [usize; 3], seed: u64) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor3::zeros(dims);
        for v in &mut x.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        x
    }

    #[test]
    fn identity_compress_is_identity() {
        let mut p = params(3, 3, 2, 2);
        p.w = Matrix::identity(3);
        p.b = vec![0.0; 3];
        let x = random_x([2, 2, 3], 1);
        let y = lce_compress(&x, &p, &mut Counters::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn summing_compress() {
        let mut p = params(2, 1, 1, 1);
        p.w = Matrix::from_rows(&[vec![1.0], vec![1.0]]);
        p.b = vec![0.0];
        let x = Tensor3 {
            dims: [1, 1, 2],
            data: vec![1.5, 2.25],
        };
        let y = lce_compress(&x, &p, &mut Counters::default()).unwrap();
        assert_eq!(y.data, vec![3.75]);
    }

    #[test]
    fn compress_matches_triple_loop() {
        let p = params(4, 2, 3, 5);
        let x = random_x([2, 3, 4], 9);
        let y = lce_compress(&x, &p, &mut Counters::default()).unwrap();
        for b in 0..2 {
            for d in 0..3 {
                for o in 0..2 {
                    let mut acc = p.b[o] as f64;
                    for i in 0..4 {
                        acc += x.get(b, d, i) as f64 * p.w.get(i, o) as f64;
                    }
                    assert!((y.get(b, d, o) as f64 - acc).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn identity_project_permutes() {
        let mut p = params(2, 2, 3, 3);
        p.w_proj = Matrix::identity(3);
        p.b_proj = vec![0.0; 3];
        let y = random_x([2, 3, 2], 4);
        let z = lce_project(&y, &p, &mut Counters::default()).unwrap();
        assert_eq!(z.dims, [2, 2, 3]);
        for b in 0..2 {
            for o in 0..2 {
                for d in 0..3 {
                    assert_eq!(z.get(b, o, d), y.get(b, d, o));
                }
            }
        }
    }

    #[test]
    fn zero_input_projects_to_bias() {
        let p = params(2, 2, 3, 4);
        let y = Tensor3::zeros([1, 3, 2]);
        let z = lce_project(&y, &p, &mut Counters::default()).unwrap();
        for o in 0..2 {
            for k in 0..4 {
                assert_eq!(z.get(0, o, k), p.b_proj[k]);
            }
        }
    }

    #[test]
    fn project_matches_triple_loop() {
        let p = params(3, 2, 4, 5);
        let y = random_x([3, 4, 2], 11);
        let z = lce_project(&y, &p, &mut Counters::default()).unwrap();
        for b in 0..3 {
            for o in 0..2 {
                for k in 0..5 {
                    let mut acc = p.b_proj[k] as f64;
                    for d in 0..4 {
                        acc += y.get(b, d, o) as f64 * p.w_proj.get(d, k) as f64;
                    }
                    assert!((z.get(b, o, k) as f64 - acc).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = params(4, 2, 3, 5);
        let x = random_x([2, 3, 5], 9);
        assert!(matches!(
            lce_compress(&x, &p, &mut Counters::default()),
            Err(ModelError::Shape(_))
        ));
    }

    #[test]
    fn flops_scale_with_rows() {
        let p = params(4, 2, 3, 5);
        let mut one = Counters::default();
        user_arch_forward(&random_x([1, 3, 4], 1), &p, &mut one).unwrap();
        let mut five = Counters::default();
        user_arch_forward(&random_x([5, 3, 4], 1), &p, &mut five).unwrap();
        assert_eq!(five.ro_flops, 5 * one.ro_flops);
        assert_eq!(one.ro_flops, 2 * (3 * 4 * 2) + 2 * (2 * 3 * 5));
    }
}
