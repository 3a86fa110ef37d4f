//! Classical comparators: the Heckman two-step estimator and a Lasso that
//! ignores selection.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{demean_columns, demean_vector, SelectionDataset, SparseFit};
use crate::error::{Error, Result};
use crate::glm::{newton_mle, GlmFamily};
use crate::lasso::{lasso, pairs_bootstrap_se, LassoConfig};

pub use crate::linalg::ols;
pub use crate::normal::inverse_mills;

/// Gradient-norm tolerance of the probit stage.
pub const PROBIT_TOL: f64 = 1e-10;
const PROBIT_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Serialize)]
pub struct HeckmanFit {
    pub theta_probit: Vec<f64>,
    pub beta: Vec<f64>,
    pub mills_coef: f64,
    pub probit_grad_norm: f64,
    /// Bootstrap standard errors of `beta`, then of `mills_coef`.
    pub se: Option<Vec<f64>>,
}

/// OLS of `y2` on `[x, imr]`. An identically zero IMR column is dropped and
/// its coefficient reported as zero.
pub fn heckman_second_stage(x: &DMatrix<f64>, y2: &DVector<f64>, imr: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let p = x.ncols();
    if imr.iter().all(|&m| m == 0.0) {
        return Ok((ols(x, y2)?, 0.0));
    }
    let design = augmented(x, imr);
    let coef = ols(&design, y2).map_err(|e| match e {
        Error::RankDeficient(_) => Error::RankDeficient("x is collinear with the inverse Mills ratio".into()),
        other => other,
    })?;
    Ok((coef.rows(0, p).into_owned(), coef[p]))
}

fn augmented(x: &DMatrix<f64>, imr: &DVector<f64>) -> DMatrix<f64> {
    let p = x.ncols();
    let mut design = x.clone().resize_horizontally(p + 1, 0.0);
    design.set_column(p, imr);
    design
}

/// Probit MLE of `y1` on `w`, then OLS of `y2` on `x` and the inverse Mills
/// ratio of the fitted index over the selected rows.
pub fn heckman_two_step(dataset: &SelectionDataset) -> Result<HeckmanFit> {
    let probit = newton_mle(dataset.w(), dataset.y1(), GlmFamily::Probit, PROBIT_TOL, PROBIT_MAX_ITER)?;
    let theta = DVector::from_column_slice(&probit.theta);
    let index = dataset.selected_w() * &theta;
    let imr = index.map(inverse_mills);
    let (beta, mills) = heckman_second_stage(dataset.x(), dataset.y2(), &imr)?;
    Ok(HeckmanFit {
        theta_probit: probit.theta,
        beta: beta.iter().copied().collect(),
        mills_coef: mills,
        probit_grad_norm: probit.grad_norm,
        se: None,
    })
}

/// [`heckman_two_step`] with pairs-bootstrap standard errors for the second
/// stage, holding the fitted Mills ratio fixed.
pub fn heckman_with_se(dataset: &SelectionDataset, n_boot: usize, seed: u64) -> Result<HeckmanFit> {
    let mut fit = heckman_two_step(dataset)?;
    let theta = DVector::from_column_slice(&fit.theta_probit);
    let imr = (dataset.selected_w() * theta).map(inverse_mills);
    let design = augmented(dataset.x(), &imr);
    let (se, _) = pairs_bootstrap_se(&design, dataset.y2(), n_boot, seed);
    fit.se = Some(se);
    Ok(fit)
}

/// Lasso of demeaned `y2` on demeaned `x` over the selected rows, with no
/// correction for selection.
pub fn direct_lasso_baseline(dataset: &SelectionDataset, lambda3: f64) -> Result<SparseFit> {
    if dataset.n_selected() == 0 {
        return Err(Error::Empty("no selected observations".into()));
    }
    let (xc, _) = demean_columns(dataset.x())?;
    let (yc, _) = demean_vector(dataset.y2())?;
    lasso(&yc, &xc, &LassoConfig::new(lambda3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_mills_column_is_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(20, 2, |_, _| rng.gen_range(-1.0..1.0));
        let y = DVector::from_fn(20, |_, _| rng.gen_range(-1.0..1.0));
        let (b, m) = heckman_second_stage(&x, &y, &DVector::zeros(20)).unwrap();
        assert_eq!(b, ols(&x, &y).unwrap());
        assert_eq!(m, 0.0);
    }

    #[test]
    fn collinear_mills_column() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let imr = DVector::from_vec(vec![2.0, 4.0, 6.0, 8.0]);
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]);
        assert!(matches!(heckman_second_stage(&x, &y, &imr), Err(Error::RankDeficient(_))));
    }
}
