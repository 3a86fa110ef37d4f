//! Selection datasets and the containers passed between estimation stages.
//!
//! Row indices are 0-based throughout.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lipschitz::LipschitzFit;

/// Coefficients with magnitude below this are treated as exact zeros.
pub const ZERO_THRESHOLD: f64 = 1e-10;

/// Full-sample selection data plus the main-equation data observed on the
/// selected rows.
#[derive(Debug, Clone)]
pub struct SelectionDataset {
    w: DMatrix<f64>,
    y1: DVector<f64>,
    x: DMatrix<f64>,
    y2: DVector<f64>,
    selected_rows: Vec<usize>,
}

/// Read-only view of the full sample used by the selection equation.
#[derive(Debug, Clone, Copy)]
pub struct FullSample<'a> {
    pub w: &'a DMatrix<f64>,
    pub y1: &'a DVector<f64>,
}

/// The selected subsample: selection regressors restricted to rows with
/// `y1 = 1`, alongside the main-equation data.
#[derive(Debug, Clone)]
pub struct SelectedSample<'a> {
    pub w: DMatrix<f64>,
    pub x: &'a DMatrix<f64>,
    pub y2: &'a DVector<f64>,
    pub rows: &'a [usize],
}

fn check_finite<'a>(name: &str, mut values: impl Iterator<Item = &'a f64>) -> Result<()> {
    if values.all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

impl SelectionDataset {
    /// Builds a dataset from the full-sample selection data and the
    /// main-equation data of the selected rows (in original row order).
    pub fn new(
        w: DMatrix<f64>,
        y1: DVector<f64>,
        x: DMatrix<f64>,
        y2: DVector<f64>,
    ) -> Result<Self> {
        if w.nrows() != y1.len() {
            return Err(Error::Dimension(format!(
                "w has {} rows but y1 has {} entries",
                w.nrows(),
                y1.len()
            )));
        }
        if x.nrows() != y2.len() {
            return Err(Error::Dimension(format!(
                "x has {} rows but y2 has {} entries",
                x.nrows(),
                y2.len()
            )));
        }
        check_finite("w", w.iter())?;
        check_finite("x", x.iter())?;
        check_finite("y2", y2.iter())?;
        if let Some(bad) = y1.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("y1 must be binary, found {bad}")));
        }
        let selected_rows: Vec<usize> = (0..y1.len()).filter(|&i| y1[i] == 1.0).collect();
        if selected_rows.len() != x.nrows() {
            return Err(Error::Dimension(format!(
                "y1 selects {} rows but x has {}",
                selected_rows.len(),
                x.nrows()
            )));
        }
        Ok(Self { w, y1, x, y2, selected_rows })
    }

    /// Builds a dataset from full-length main-equation arrays, keeping only
    /// the rows with `y1 = 1`. Entries of `x_full`/`y2_full` on other rows are ignored.
    pub fn from_full(
        w: DMatrix<f64>,
        y1: DVector<f64>,
        x_full: &DMatrix<f64>,
        y2_full: &DVector<f64>,
    ) -> Result<Self> {
        if x_full.nrows() != y1.len() || y2_full.len() != y1.len() {
            return Err(Error::Dimension("full-length x/y2 must match y1".into()));
        }
        let rows: Vec<usize> = (0..y1.len()).filter(|&i| y1[i] == 1.0).collect();
        let x = crate::linalg::select_rows(x_full, &rows);
        let y2 = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y2_full[i]));
        Self::new(w, y1, x, y2)
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn d(&self) -> usize {
        self.w.ncols()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_selected(&self) -> usize {
        self.selected_rows.len()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn y1(&self) -> &DVector<f64> {
        &self.y1
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y2(&self) -> &DVector<f64> {
        &self.y2
    }

    pub fn selected_rows(&self) -> &[usize] {
        &self.selected_rows
    }

    /// Splits into the full-sample and selected-sample views.
    pub fn split_selected(&self) -> (FullSample<'_>, SelectedSample<'_>) {
        let full = FullSample { w: &self.w, y1: &self.y1 };
        let selected = SelectedSample {
            w: crate::linalg::select_rows(&self.w, &self.selected_rows),
            x: &self.x,
            y2: &self.y2,
            rows: &self.selected_rows,
        };
        (full, selected)
    }

    /// Selection regressors on the selected rows.
    pub fn selected_w(&self) -> DMatrix<f64> {
        crate::linalg::select_rows(&self.w, &self.selected_rows)
    }

    /// Scatters per-selected-row values back to full length; unselected rows are `None`.
    pub fn scatter_selected(&self, values: &DVector<f64>) -> Vec<Option<f64>> {
        let mut out = vec![None; self.n()];
        for (k, &row) in self.selected_rows.iter().enumerate() {
            out[row] = Some(values[k]);
        }
        out
    }
}

/// Output of the second stage: the single index on the selected rows, the
/// `p + 1` Lipschitz fits (position 0 for `y2`, then one per column of `x`)
/// and the residualized response and design.
#[derive(Debug, Clone)]
pub struct ResidualBundle {
    pub index: DVector<f64>,
    pub fits: Vec<LipschitzFit>,
    pub v0: DVector<f64>,
    pub v: DMatrix<f64>,
}

/// A sparse coefficient vector together with its optimality certificate.
#[derive(Debug, Clone, Serialize)]
pub struct SparseFit {
    pub beta: Vec<f64>,
    pub support: Vec<usize>,
    pub lambda: f64,
    pub kkt_residual: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SparseFit {
    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }
}

/// Zeroes entries below [`ZERO_THRESHOLD`] and returns the support.
pub fn hard_zero(beta: &mut DVector<f64>) -> Vec<usize> {
    let mut support = Vec::new();
    for (j, b) in beta.iter_mut().enumerate() {
        if b.abs() < ZERO_THRESHOLD {
            *b = 0.0;
        } else {
            support.push(j);
        }
    }
    support
}

/// Centers each column; returns the centered matrix and the column means.
pub fn demean_columns(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if m.nrows() == 0 {
        return Err(Error::Empty("cannot demean a matrix without rows".into()));
    }
    let n = m.nrows() as f64;
    let means = DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n));
    let mut centered = m.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    Ok((centered, means))
}

/// Centers a vector; returns it with its mean.
pub fn demean_vector(v: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    if v.is_empty() {
        return Err(Error::Empty("cannot demean an empty vector".into()));
    }
    let mean = v.mean();
    Ok((v.add_scalar(-mean), mean))
}

/// Root mean square of each column, `sqrt((1/n) Σ_i v_ij²)`.
pub fn column_rms(v: &DMatrix<f64>) -> DVector<f64> {
    let n = v.nrows().max(1) as f64;
    DVector::from_iterator(v.ncols(), v.column_iter().map(|c| (c.norm_squared() / n).sqrt()))
}
