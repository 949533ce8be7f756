//! Dense row-major matrices and the handful of vector kernels the crate needs.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// `self · x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.iter_rows().map(|r| dot(r, x)).collect()
    }

    /// `selfᵀ · y`
    pub fn tr_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yi) in self.iter_rows().zip(y) {
            if yi != 0.0 {
                axpy(yi, r, &mut out);
            }
        }
        out
    }

    /// `self += scale · u vᵀ`
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let s = scale * ui;
            if s != 0.0 {
                axpy(s, v, self.row_mut(i));
            }
        }
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scales every row to unit L2 norm; zero rows are left untouched.
    pub fn normalize_rows(&mut self) {
        for i in 0..self.rows {
            let row = self.row_mut(i);
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Cosine similarity, or `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| libm::exp(z - max)).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= s);
    out
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&z| z - lse).collect()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + libm::log(xs.iter().map(|&x| libm::exp(x - max)).sum::<f64>())
}

/// Coordinates of every row on the two leading principal components.
///
/// Components come from power iteration on the centred data with a fixed
/// start, and each is signed so that its largest-magnitude entry is positive.
/// Directions without variance project to zero.
pub fn project_2d(points: &Matrix) -> Vec<[f64; 2]> {
    let (n, d) = (points.rows(), points.cols());
    let mut centred = points.clone();
    if n > 0 {
        let mut mean = alloc::vec![0.0; d];
        points.iter_rows().for_each(|r| axpy(1.0 / n as f64, r, &mut mean));
        for i in 0..n {
            axpy(-1.0, &mean, centred.row_mut(i));
        }
    }
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(2);
    for c in 0..2 {
        let mut rng = crate::rng::SplitMix64::new(0x9CA0 + c as u64);
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let mut found = false;
        for _ in 0..500 {
            for prev in &components {
                let p = dot(prev, &v);
                axpy(-p, prev, &mut v);
            }
            let nv = norm(&v);
            if !(nv > 1e-300) {
                break;
            }
            v.iter_mut().for_each(|x| *x /= nv);
            let mut w = centred.tr_mul_vec(&centred.mul_vec(&v));
            for prev in &components {
                let p = dot(prev, &w);
                axpy(-p, prev, &mut w);
            }
            let nw = norm(&w);
            if !(nw > 1e-12 * (1.0 + norm(centred.as_slice()))) {
                break;
            }
            w.iter_mut().for_each(|x| *x /= nw);
            let delta = sq_dist(&w, &v);
            v = w;
            found = true;
            if delta < 1e-20 {
                break;
            }
        }
        if !found {
            v = alloc::vec![0.0; d];
        }
        let pivot = v.iter().copied().fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
    }
    centred
        .iter_rows()
        .map(|r| [dot(r, &components[0]), dot(r, &components[1])])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mat_vec_products() {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(m.mul_vec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(m.tr_mul_vec(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn ragged_rows_rejected() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(Matrix::from_rows(&rows).is_err());
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[1001.0, 1002.0, 1003.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        let ls = log_softmax(&[0.0, 0.0]);
        assert!((ls[0] + core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn projection_follows_variance() {
        let rows: Vec<[f64; 3]> = (0..20)
            .map(|i| {
                let t = i as f64 - 9.5;
                [0.5 + 0.01 * (i % 3) as f64, 3.0 * t, 7.0 + 0.2 * ((i % 4) as f64 - 1.5)]
            })
            .collect();
        let xy = project_2d(&Matrix::from_rows(&rows).unwrap());
        for (i, p) in xy.iter().enumerate() {
            assert!((p[0] - 3.0 * (i as f64 - 9.5)).abs() < 1e-2);
        }
        let spread = |j: usize| xy.iter().map(|p| p[j] * p[j]).sum::<f64>();
        assert!(spread(0) > spread(1));
        let flat = project_2d(&Matrix::from_rows(&[[1.0, 1.0]; 4]).unwrap());
        assert!(flat.iter().all(|p| p == &[0.0, 0.0]));
    }

    #[test]
    fn cosine_degenerate() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
        assert_eq!(cosine(&[2.0, 0.0], &[-1.0, 0.0]), Some(-1.0));
    }
}
