//! Small dense helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a triangular factor is declared singular.
const RANK_TOL: f64 = 1e-10;

/// Least-squares coefficients of `y` on the columns of `x`, via Householder QR.
///
/// Fails with [`Error::RankDeficient`] when `x` does not have full column rank.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let (n, p) = x.shape();
    if n != y.len() {
        return Err(Error::Dimension(format!("x has {n} rows, y has {}", y.len())));
    }
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    if n < p {
        return Err(Error::RankDeficient(format!("{p} columns but only {n} rows")));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..p).map(|k| r[(k, k)].abs()).fold(0.0, f64::max);
    if scale == 0.0 || (0..p).any(|k| r[(k, k)].abs() <= RANK_TOL * scale) {
        return Err(Error::RankDeficient("design matrix".into()));
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient("triangular solve".into()))
}

/// Copy of the listed columns, in the given order.
pub fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, k| m[(i, cols[k])])
}

/// Copy of the listed rows, in the given order.
pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |k, j| m[(rows[k], j)])
}

pub fn select_entries(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// `‖v‖_∞`
pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn l1_norm(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Sample standard deviation with the `n - 1` denominator (0 for fewer than two entries).
pub fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let ss: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
    (ss / (n - 1) as f64).sqrt()
}
