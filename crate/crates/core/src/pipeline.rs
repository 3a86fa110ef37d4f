//! The full multi-stage estimator on a selection dataset.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bias::{g_hat_closed_form, g_tilde_nls, BiasEstimate};
use crate::data::{demean_columns, demean_vector, ResidualBundle, SelectionDataset, SparseFit};
use crate::diagnostics::{incoherence_stat, restricted_eig_probe};
use crate::error::{Result, StageContext};
use crate::glm::{default_lambda1, fit_l1_glm, GlmFamily, GlmFit, GlmOptions};
use crate::lasso::{default_lambda3, iterate_lambda3, lasso, post_lasso, LassoConfig, PostLassoFit};
use crate::lipschitz::{cross_validate_l_pooled, residualize, CvResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LipschitzChoice {
    Fixed { lipschitz: f64 },
    /// Doubling cross-validation, run per regression; the largest choice is used.
    CrossValidated { l0: f64, split_fraction: f64, max_doublings: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Lambda3Choice {
    Fixed { lambda3: f64 },
    /// `scale · k2 · sqrt(k1 ln d / n_s)`.
    Default { k1: usize, k2: usize, scale: f64 },
    /// Alternating residual-scale rule.
    Iterative { c: f64, tol: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub family: GlmFamily,
    /// Overrides `lambda1_scale · sqrt(ln d / n)` when set.
    pub lambda1: Option<f64>,
    pub lambda1_scale: f64,
    pub lipschitz: LipschitzChoice,
    pub lambda3: Lambda3Choice,
    pub weighted: bool,
    /// Center the residualized data before the third stage.
    pub demean: bool,
    pub n_boot: usize,
    pub seed: u64,
    pub glm: GlmOptions,
    pub re_dirs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            family: GlmFamily::Probit,
            lambda1: None,
            lambda1_scale: 0.5,
            lipschitz: LipschitzChoice::Fixed { lipschitz: 1.0 },
            lambda3: Lambda3Choice::Default { k1: 4, k2: 2, scale: 0.2 },
            weighted: false,
            demean: true,
            n_boot: 200,
            seed: 0,
            glm: GlmOptions::default(),
            re_dirs: 1000,
        }
    }
}

/// Output of the three estimation stages.
#[derive(Debug, Clone, Serialize)]
pub struct ThreeStageFit {
    pub glm: GlmFit,
    pub lipschitz: f64,
    pub cv: Option<CvResult>,
    #[serde(skip)]
    pub bundle: ResidualBundle,
    pub lasso: SparseFit,
    pub sigma_eta: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub incoherence: Option<f64>,
    pub re_probe: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub n: usize,
    pub n_selected: usize,
    pub d: usize,
    pub p: usize,
    pub lambda1: f64,
    pub theta_support: Vec<usize>,
    pub theta: Vec<f64>,
    pub lipschitz: f64,
    pub cv: Option<CvResult>,
    pub lambda3: f64,
    pub sigma_eta: Option<f64>,
    pub beta: Vec<f64>,
    pub support: Vec<usize>,
    pub kkt_residual: f64,
    pub post_lasso: PostLassoFit,
    pub g_hat: BiasEstimate,
    pub g_tilde: BiasEstimate,
    pub diagnostics: Diagnostics,
}

/// Third-stage inputs: the residualized response and design, centered on request.
pub fn stage3_inputs(bundle: &ResidualBundle, demean: bool) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if demean {
        let (v0, _) = demean_vector(&bundle.v0)?;
        let (v, _) = demean_columns(&bundle.v)?;
        Ok((v0, v))
    } else {
        Ok((bundle.v0.clone(), bundle.v.clone()))
    }
}

/// Chooses L by pooled cross-validation of the `p + 1` regressions on the index.
pub fn choose_lipschitz(index: &DVector<f64>, x: &DMatrix<f64>, y2: &DVector<f64>, choice: &LipschitzChoice, seed: u64) -> Result<(f64, Option<CvResult>)> {
    match *choice {
        LipschitzChoice::Fixed { lipschitz } => Ok((lipschitz, None)),
        LipschitzChoice::CrossValidated { l0, split_fraction, max_doublings } => {
            let mut targets: Vec<&[f64]> = vec![y2.as_slice()];
            targets.extend(x.as_slice().chunks(x.nrows().max(1)).take(x.ncols()));
            let run = cross_validate_l_pooled(index.as_slice(), &targets, l0, split_fraction, max_doublings, seed)?;
            Ok((run.lipschitz, Some(run)))
        }
    }
}

/// Stage 1 (ℓ1 binary GLM), stage 2 (Lipschitz residualization) and
/// stage 3 (Lasso).
pub fn fit_three_stage(dataset: &SelectionDataset, cfg: &PipelineConfig) -> Result<ThreeStageFit> {
    let lambda1 = cfg.lambda1.unwrap_or_else(|| default_lambda1(dataset.n(), dataset.d(), cfg.lambda1_scale));
    let glm = fit_l1_glm(dataset.w(), dataset.y1(), lambda1, cfg.family, &cfg.glm).stage("stage 1")?;
    let theta = glm.index_coefficients();
    let index = dataset.selected_w() * &theta;
    let (lipschitz, cv) = choose_lipschitz(&index, dataset.x(), dataset.y2(), &cfg.lipschitz, cfg.seed).stage("lipschitz selection")?;
    let bundle = residualize(dataset, &theta, lipschitz).stage("stage 2")?;
    let (v0, v) = stage3_inputs(&bundle, cfg.demean)?;
    let (lasso_fit, sigma_eta) = match cfg.lambda3 {
        Lambda3Choice::Fixed { lambda3 } => (run_lasso(&v0, &v, lambda3, cfg.weighted)?, None),
        Lambda3Choice::Default { k1, k2, scale } => {
            let l3 = default_lambda3(k1, k2, dataset.d(), dataset.n_selected(), scale);
            (run_lasso(&v0, &v, l3, cfg.weighted)?, None)
        }
        Lambda3Choice::Iterative { c, tol } => {
            let it = iterate_lambda3(&v0, &v, c, tol).stage("stage 3")?;
            (it.fit, Some(it.sigma_eta))
        }
    };
    Ok(ThreeStageFit { glm, lipschitz, cv, bundle, lasso: lasso_fit, sigma_eta })
}

fn run_lasso(v0: &DVector<f64>, v: &DMatrix<f64>, lambda3: f64, weighted: bool) -> Result<SparseFit> {
    let mut lc = LassoConfig::new(lambda3);
    lc.weighted = weighted;
    lasso(v0, v, &lc).stage("stage 3")
}

/// Three stages followed by the post-Lasso refit, both bias estimators and
/// the design diagnostics.
pub fn run_pipeline(dataset: &SelectionDataset, cfg: &PipelineConfig) -> Result<PipelineReport> {
    let fit = fit_three_stage(dataset, cfg)?;
    let (v0, v) = stage3_inputs(&fit.bundle, cfg.demean)?;
    let support = fit.lasso.support.clone();
    let post = post_lasso(&v0, &v, &support, cfg.n_boot, cfg.seed).stage("post-lasso")?;
    let beta = fit.lasso.beta_vector();
    let theta = fit.glm.index_coefficients();
    let g_hat = g_hat_closed_form(&fit.bundle, &beta).stage("bias (closed form)")?;
    let g_tilde = g_tilde_nls(dataset, &theta, &beta, fit.lipschitz).stage("bias (least squares)")?;
    let diagnostics = Diagnostics {
        incoherence: if support.is_empty() { None } else { incoherence_stat(&v, &support).ok() },
        re_probe: if support.is_empty() || cfg.re_dirs == 0 {
            None
        } else {
            restricted_eig_probe(&v, &support, cfg.re_dirs, cfg.seed).ok()
        },
    };
    Ok(PipelineReport {
        n: dataset.n(),
        n_selected: dataset.n_selected(),
        d: dataset.d(),
        p: dataset.p(),
        lambda1: fit.glm.lambda1,
        theta_support: fit.glm.support(),
        theta: fit.glm.theta.clone(),
        lipschitz: fit.lipschitz,
        cv: fit.cv.clone(),
        lambda3: fit.lasso.lambda,
        sigma_eta: fit.sigma_eta,
        beta: fit.lasso.beta.clone(),
        support,
        kkt_residual: fit.lasso.kkt_residual,
        post_lasso: post,
        g_hat,
        g_tilde,
        diagnostics,
    })
}
