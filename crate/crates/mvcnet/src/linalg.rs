//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{Cholesky, DMatrix};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Outcome of a power iteration on a symmetric positive semi-definite matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
///
/// Iterates until the eigen-residual `||Gv - rho v||` falls below `tol * rho`.
pub fn power_iteration(g: ArrayView2<f64>, tol: f64, max_iter: usize) -> PowerEstimate {
    let n = g.nrows();
    if n == 0 {
        return PowerEstimate { value: 0.0, iterations: 0, converged: true };
    }
    let mut v: Array1<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i as f64) * 0.7 + 0.3).sin()).collect();
    let norm = v.dot(&v).sqrt();
    v /= norm;
    let mut rho = 0.0;
    for it in 1..=max_iter {
        let w = g.dot(&v);
        rho = v.dot(&w);
        let wn = w.dot(&w).sqrt();
        if wn == 0.0 {
            return PowerEstimate { value: 0.0, iterations: it, converged: true };
        }
        let resid = (&w - &(&v * rho)).dot(&(&w - &(&v * rho))).sqrt();
        if resid <= tol * rho.abs() {
            return PowerEstimate { value: rho, iterations: it, converged: true };
        }
        v = w / wn;
    }
    PowerEstimate { value: rho, iterations: max_iter, converged: false }
}

pub(crate) fn to_na(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub(crate) fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Solves `S X = B` for symmetric positive definite `S`. Returns `None` if `S`
/// is not numerically positive definite.
pub fn spd_solve(s: ArrayView2<f64>, b: ArrayView2<f64>) -> Option<Array2<f64>> {
    let chol = Cholesky::new(to_na(s))?;
    let x = chol.solve(&to_na(b));
    Some(from_na(&x))
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(s: ArrayView2<f64>) -> Option<Array2<f64>> {
    let chol = Cholesky::new(to_na(s))?;
    Some(from_na(&chol.inverse()))
}

pub fn frobenius(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn norm2(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn all_finite<'a>(it: impl IntoIterator<Item = &'a f64>) -> bool {
    it.into_iter().all(|x| x.is_finite())
}
