//! Dense row-major matrices and the handful of kernels the model needs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                format!("{rows}x{cols} = {} values", rows * cols),
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!("row {i} of length {cols}"), r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `out = W·x + b` for `W` stored row-major as `out.len() × x.len()`.
pub fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    debug_assert_eq!(w.len(), out.len() * n_in);
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
        *o = bias + dot(row, x);
    }
}

/// Backward of [`affine`]: accumulates `dW += dy·xᵀ`, `db += dy` (when given)
/// and returns nothing; `dx` (when given) is overwritten with `Wᵀ·dy`.
pub fn affine_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: Option<(&mut [f64], &mut [f64])>,
    dx: Option<&mut [f64]>,
) {
    let n_in = x.len();
    if let Some((dw, db)) = dw {
        for ((grow, gb), &d) in dw.chunks_exact_mut(n_in).zip(db.iter_mut()).zip(dy) {
            *gb += d;
            if d != 0.0 {
                for (g, xi) in grow.iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
    }
    if let Some(dx) = dx {
        dx.iter_mut().for_each(|v| *v = 0.0);
        for (row, &d) in w.chunks_exact(n_in).zip(dy) {
            if d != 0.0 {
                for (g, wi) in dx.iter_mut().zip(row) {
                    *g += d * wi;
                }
            }
        }
    }
}

/// L2-normalizes `v` in place and returns the original norm, or `None` when
/// the norm is zero or not finite.
pub fn normalize_in_place(v: &mut [f64]) -> Option<f64> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(n)
}

/// Backward of `u = z/|z|`: maps `du` to `dz = (du − u·(u·du)) / |z|`.
pub fn normalize_backward(unit: &[f64], norm: f64, du: &[f64], dz: &mut [f64]) {
    let proj = dot(unit, du);
    for ((g, &d), &u) in dz.iter_mut().zip(du).zip(unit) {
        *g = (d - u * proj) / norm;
    }
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Accumulates `scale · ∂cos(a, b)/∂a` into `grad`.
///
/// `∂cos/∂a = (b/|b| − cos·a/|a|) / |a|`.
pub fn cosine_grad_acc(a: &[f64], b: &[f64], cos: f64, scale: f64, grad: &mut [f64]) {
    let na = norm(a);
    let nb = norm(b);
    for ((g, &ai), &bi) in grad.iter_mut().zip(a).zip(b) {
        *g += scale * (bi / nb - cos * ai / na) / na;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_and_backward_agree_with_hand_values() {
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.5, -0.5];
        let x = [1.0, 0.0, -1.0];
        let mut y = [0.0; 2];
        affine(&w, &b, &x, &mut y);
        assert_eq!(y, [-1.5, -2.5]);

        let mut dw = [0.0; 6];
        let mut db = [0.0; 2];
        let mut dx = [9.0; 3];
        affine_backward(&w, &x, &[1.0, 2.0], Some((&mut dw, &mut db)), Some(&mut dx));
        assert_eq!(dw, [1.0, 0.0, -1.0, 2.0, 0.0, -2.0]);
        assert_eq!(db, [1.0, 2.0]);
        assert_eq!(dx, [9.0, 12.0, 15.0]);
    }

    #[test]
    fn zero_vector_does_not_normalize() {
        let mut v = [0.0; 4];
        assert!(normalize_in_place(&mut v).is_none());
    }

    #[test]
    fn cosine_gradient_matches_central_difference() {
        let a = [0.3, -1.2, 0.7];
        let b = [1.1, 0.4, -0.2];
        let mut g = [0.0; 3];
        cosine_grad_acc(&a, &b, cosine(&a, &b), 1.0, &mut g);
        let h = 1e-6;
        for k in 0..3 {
            let mut ap = a;
            let mut am = a;
            ap[k] += h;
            am[k] -= h;
            let fd = (cosine(&ap, &b) - cosine(&am, &b)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn matrix_shape_checked() {
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
