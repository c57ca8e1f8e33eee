//! Small dense helpers on top of faer.

use faer::{c64, Mat, MatRef, Par, Side};

use crate::error::{FkmdError, Result};

pub(crate) const ONE: c64 = c64 { re: 1.0, im: 0.0 };
pub(crate) const ZERO: c64 = c64 { re: 0.0, im: 0.0 };
pub(crate) const I: c64 = c64 { re: 0.0, im: 1.0 };

pub(crate) fn par() -> Par {
    faer::get_global_parallelism()
}

/// Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix.
pub fn sym_eigen(m: MatRef<'_, f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| FkmdError::Numerical(format!("symmetric eigendecomposition failed: {e:?}")))?;
    let values = (0..m.nrows()).map(|i| evd.S()[i]).collect();
    Ok((values, evd.U().to_owned()))
}

/// `V diag(f(w)) Vᵀ`.
pub(crate) fn sym_function(values: &[f64], vectors: MatRef<'_, f64>, f: impl Fn(f64) -> f64) -> Mat<f64> {
    let n = values.len();
    let scaled = Mat::from_fn(n, n, |i, j| vectors[(i, j)] * f(values[j]));
    let mut out = &scaled * vectors.transpose();
    symmetrize_in_place(&mut out);
    out
}

pub(crate) fn symmetrize_in_place(m: &mut Mat<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in j + 1..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn to_complex(m: MatRef<'_, f64>) -> Mat<c64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| c64::new(m[(i, j)], 0.0))
}

pub(crate) fn is_exactly_real(m: MatRef<'_, c64>) -> bool {
    (0..m.ncols()).all(|j| (0..m.nrows()).all(|i| m[(i, j)].im == 0.0))
}

pub fn frobenius(m: MatRef<'_, f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            s += m[(i, j)] * m[(i, j)];
        }
    }
    s.sqrt()
}

pub fn frobenius_c(m: MatRef<'_, c64>) -> f64 {
    let mut s = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            s += m[(i, j)].norm_sqr();
        }
    }
    s.sqrt()
}

pub(crate) fn max_abs_asymmetry(m: MatRef<'_, f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..m.ncols() {
        for i in j + 1..m.nrows() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub(crate) fn max_abs(m: MatRef<'_, f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            worst = worst.max(m[(i, j)].abs());
        }
    }
    worst
}

/// Induced 1-norm (max column sum).
pub(crate) fn norm_one_c(m: MatRef<'_, c64>) -> f64 {
    (0..m.ncols())
        .map(|j| (0..m.nrows()).map(|i| m[(i, j)].norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `m · v` for a dense matrix and a slice.
pub(crate) fn mat_vec(m: MatRef<'_, f64>, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.ncols(), v.len());
    let mut out = vec![0.0; m.nrows()];
    for (j, &vj) in v.iter().enumerate() {
        if vj == 0.0 {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += m[(i, j)] * vj;
        }
    }
    out
}
