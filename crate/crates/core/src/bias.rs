//! Estimators of the selection-bias function on the selected sample.

use nalgebra::DVector;
use serde::Serialize;

use crate::data::{ResidualBundle, SelectionDataset};
use crate::error::{Error, Result};
use crate::lipschitz::{fit_lipschitz, LipschitzFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    ClosedForm,
    Nls,
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasEstimate {
    pub kind: BiasKind,
    pub g_at_sample: Vec<f64>,
    pub fit: Option<LipschitzFit>,
}

/// `ĝ(u_i) = m̂_0(u_i) − Σ_j m̂_j(u_i) β_j` from the second-stage fits.
pub fn g_hat_closed_form(bundle: &ResidualBundle, beta: &DVector<f64>) -> Result<BiasEstimate> {
    let p = bundle.v.ncols();
    if beta.len() != p || bundle.fits.len() != p + 1 {
        return Err(Error::Dimension(format!("beta has length {}, bundle holds {} columns", beta.len(), p)));
    }
    let g = bundle
        .index
        .iter()
        .map(|&u| {
            let mut val = bundle.fits[0].predict(u);
            for (j, &b) in beta.iter().enumerate() {
                if b != 0.0 {
                    val -= bundle.fits[j + 1].predict(u) * b;
                }
            }
            val
        })
        .collect();
    Ok(BiasEstimate { kind: BiasKind::ClosedForm, g_at_sample: g, fit: None })
}

/// Lipschitz regression of the partial residual `y2 − xβ` on the index `w·θ`.
pub fn g_tilde_nls(dataset: &SelectionDataset, theta: &DVector<f64>, beta: &DVector<f64>, lipschitz: f64) -> Result<BiasEstimate> {
    if theta.len() != dataset.d() || beta.len() != dataset.p() {
        return Err(Error::Dimension("theta or beta does not match the dataset".into()));
    }
    let u = dataset.selected_w() * theta;
    let partial = dataset.y2() - dataset.x() * beta;
    let fit = fit_lipschitz(u.as_slice(), partial.as_slice(), lipschitz)?;
    let g = u.iter().map(|&ui| fit.predict(ui)).collect();
    Ok(BiasEstimate { kind: BiasKind::Nls, g_at_sample: g, fit: Some(fit) })
}
