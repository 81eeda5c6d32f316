//! Minimal row-major f32 matrix.
//!
//! Kernels loop in a fixed order (ascending index along every reduction) so
//! a row's result depends only on that row's inputs. That property is what
//! makes request-level and impression-level forwards bit-comparable.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn gather_rows(&self, index: &[u32]) -> Matrix {
        let mut data = Vec::with_capacity(index.len() * self.cols);
        for &i in index {
            data.extend_from_slice(self.row(i as usize));
        }
        Matrix {
            rows: index.len(),
            cols: self.cols,
            data,
        }
    }

    /// Row-wise concatenation of matrices with equal row counts.
    pub fn hconcat(parts: &[&Matrix]) -> Matrix {
        let rows = parts.first().map_or(0, |m| m.rows);
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                assert_eq!(m.rows, rows, "hconcat row mismatch");
                data.extend_from_slice(m.row(r));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `out[j] = bias[j] + sum_i x[i] * w[i][j]`, accumulated in ascending i.
pub fn vec_mat(x: &[f32], w: &Matrix, bias: Option<&[f32]>) -> Vec<f32> {
    assert_eq!(x.len(), w.rows(), "vec_mat inner dimension");
    let mut out = vec![0.0f32; w.cols()];
    for (i, &xi) in x.iter().enumerate() {
        let wr = w.row(i);
        for (o, &wij) in out.iter_mut().zip(wr) {
            *o += xi * wij;
        }
    }
    if let Some(b) = bias {
        for (o, &bj) in out.iter_mut().zip(b) {
            *o += bj;
        }
    }
    out
}

/// Row-by-row affine map: every output row is `vec_mat` of the input row.
pub fn affine(x: &Matrix, w: &Matrix, bias: Option<&[f32]>) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    for r in 0..x.rows() {
        let y = vec_mat(x.row(r), w, bias);
        out.row_mut(r).copy_from_slice(&y);
    }
    out
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "dot length");
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn relu(x: f32) -> f32 {
    x.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_matches_hand_computation() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let w = Matrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.5, 1.0, 0.0]]);
        let y = affine(&x, &w, Some(&[0.0, 1.0, -1.0]));
        assert_eq!(y.row(0), &[2.0, 3.0, 1.0]);
        assert_eq!(y.row(1), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn gather_and_concat() {
        let m = Matrix::from_rows(&[vec![1.0], vec![2.0]]);
        let g = m.gather_rows(&[1, 1, 0]);
        assert_eq!(g.data(), &[2.0, 2.0, 1.0]);
        let c = Matrix::hconcat(&[&g, &g]);
        assert_eq!(c.shape(), (3, 2));
        assert_eq!(c.row(2), &[1.0, 1.0]);
    }
}
