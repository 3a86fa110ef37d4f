//! Third stage: Lasso on the residualized data, tuning rules, and the
//! post-Lasso refit with bootstrap standard errors.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{column_rms, hard_zero, SparseFit};
use crate::error::{Error, Result};
use crate::linalg::{ols, sample_sd, select_columns, select_rows};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoConfig {
    pub lambda3: f64,
    /// Scale each penalty by the column RMS of the design.
    pub weighted: bool,
    pub tol: f64,
    pub max_iter: usize,
}

impl LassoConfig {
    pub fn new(lambda3: f64) -> Self {
        Self { lambda3, weighted: false, tol: 1e-9, max_iter: 100_000 }
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Penalty weights: ones, or column RMS floored at `1e-8 · max`.
pub fn penalty_weights(v: &DMatrix<f64>, weighted: bool) -> DVector<f64> {
    if !weighted {
        return DVector::from_element(v.ncols(), 1.0);
    }
    let rms = column_rms(v);
    let floor = 1e-8 * rms.amax();
    rms.map(|s| s.max(floor))
}

/// KKT violation of `(1/2n)|y - Xβ|² + λ Σ w_j |β_j|` given the smooth
/// gradient `-(1/n) Xᵀ(y - Xβ)`.
fn kkt_violation(beta: &DVector<f64>, grad: &DVector<f64>, lambda: f64, weights: &DVector<f64>) -> f64 {
    (0..beta.len())
        .map(|j| {
            let pen = lambda * weights[j];
            if beta[j] != 0.0 {
                (grad[j] + pen * beta[j].signum()).abs()
            } else {
                (grad[j].abs() - pen).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Recomputes the KKT residual of a fit from scratch.
pub fn lasso_kkt_residual(v0: &DVector<f64>, v: &DMatrix<f64>, beta: &DVector<f64>, lambda: f64, weights: &DVector<f64>) -> f64 {
    let n = v.nrows() as f64;
    let resid = v0 - v * beta;
    let grad = -v.tr_mul(&resid) / n;
    kkt_violation(beta, &grad, lambda, weights)
}

pub fn lasso_objective(v0: &DVector<f64>, v: &DMatrix<f64>, beta: &DVector<f64>, lambda: f64, weights: &DVector<f64>) -> f64 {
    let n = v.nrows() as f64;
    let pen: f64 = beta.iter().zip(weights.iter()).map(|(b, w)| w * b.abs()).sum();
    (v0 - v * beta).norm_squared() / (2.0 * n) + lambda * pen
}

/// Cyclic coordinate descent with covariance updates. Sweeps run over the
/// active set until it settles, then a full sweep checks for new entries.
pub fn lasso(v0: &DVector<f64>, v: &DMatrix<f64>, cfg: &LassoConfig) -> Result<SparseFit> {
    let weights = penalty_weights(v, cfg.weighted);
    lasso_with_weights(v0, v, cfg, &weights)
}

pub fn lasso_with_weights(v0: &DVector<f64>, v: &DMatrix<f64>, cfg: &LassoConfig, weights: &DVector<f64>) -> Result<SparseFit> {
    let (n, p) = v.shape();
    if v0.len() != n {
        return Err(Error::Dimension(format!("response has {} entries, design {} rows", v0.len(), n)));
    }
    if weights.len() != p {
        return Err(Error::Dimension("one penalty weight per column".into()));
    }
    if n == 0 {
        return Err(Error::Empty("lasso needs observations".into()));
    }
    if !(cfg.lambda3 >= 0.0) || !(cfg.tol > 0.0) {
        return Err(Error::InvalidArgument("lambda3 must be nonnegative and tol positive".into()));
    }
    let nf = n as f64;
    let gram = v.tr_mul(v) / nf;
    let corr = v.tr_mul(v0) / nf;
    let lambda = cfg.lambda3;

    let mut beta = DVector::<f64>::zeros(p);
    let mut grad = -corr.clone();
    let mut iterations = 0;

    let sweep = |coords: &mut dyn Iterator<Item = usize>, beta: &mut DVector<f64>, grad: &mut DVector<f64>| -> f64 {
        let mut max_change: f64 = 0.0;
        for j in coords {
            let gjj = gram[(j, j)];
            if gjj <= 0.0 {
                continue;
            }
            let old = beta[j];
            let new = soft_threshold(gjj * old - grad[j], lambda * weights[j]) / gjj;
            if new != old {
                let delta = new - old;
                beta[j] = new;
                grad.axpy(delta, &gram.column(j), 1.0);
                max_change = max_change.max(delta.abs() * gjj.sqrt());
            }
        }
        max_change
    };

    let inner_tol = cfg.tol * 1e-2;
    loop {
        iterations += 1;
        sweep(&mut (0..p), &mut beta, &mut grad);
        // settle the active set
        loop {
            let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
            let change = sweep(&mut active.into_iter(), &mut beta, &mut grad);
            iterations += 1;
            if change <= inner_tol || iterations >= cfg.max_iter {
                break;
            }
        }
        let kkt = kkt_violation(&beta, &grad, lambda, weights);
        if kkt <= cfg.tol || iterations >= cfg.max_iter {
            break;
        }
    }

    hard_zero(&mut beta);
    let kkt = lasso_kkt_residual(v0, v, &beta, lambda, weights);
    let objective = lasso_objective(v0, v, &beta, lambda, weights);
    let converged = kkt <= cfg.tol;
    if !converged {
        return Err(Error::NotConverged { solver: "lasso", iterations, residual: kkt });
    }
    let support = (0..p).filter(|&j| beta[j] != 0.0).collect();
    Ok(SparseFit {
        beta: beta.iter().copied().collect(),
        support,
        lambda,
        kkt_residual: kkt,
        objective,
        iterations,
        converged,
    })
}

/// Default third-stage penalty `scale · k2 · sqrt(k1 ln d / n_s)`.
pub fn default_lambda3(k1: usize, k2: usize, d: usize, n_s: usize, scale: f64) -> f64 {
    scale * k2 as f64 * (k1 as f64 * (d as f64).ln() / n_s as f64).sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct Lambda3Iteration {
    pub fit: SparseFit,
    pub sigma_eta: f64,
    pub sigma_v: f64,
    pub lambdas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub converged: bool,
}

const MAX_SIGMA_ROUNDS: usize = 50;

/// Alternates Lasso fits with `λ = c · σ̂_v · σ̂_η · sqrt(ln p / n_s)` and
/// updates of `σ̂_η` to the residual standard deviation, from `σ̂_η = 1`.
pub fn iterate_lambda3(v0: &DVector<f64>, v: &DMatrix<f64>, c: f64, tol: f64) -> Result<Lambda3Iteration> {
    if !(c > 2.0) || !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("need c > 2 and tol > 0 (got c = {c}, tol = {tol})")));
    }
    let (n_s, p) = v.shape();
    let sigma_v = column_rms(v).amax();
    let rate = ((p as f64).ln() / n_s as f64).sqrt();
    let mut sigma = 1.0;
    let mut lambdas = Vec::new();
    let mut sigmas = vec![sigma];
    let mut converged = false;
    let mut fit = None;
    for _ in 0..MAX_SIGMA_ROUNDS {
        let lambda = c * sigma_v * sigma * rate;
        lambdas.push(lambda);
        let f = lasso(v0, v, &LassoConfig::new(lambda))?;
        let resid = v0 - v * f.beta_vector();
        let next = sample_sd(resid.as_slice());
        sigmas.push(next);
        fit = Some(f);
        let done = (next - sigma).abs() <= tol;
        sigma = next;
        if done {
            converged = true;
            break;
        }
    }
    Ok(Lambda3Iteration { fit: fit.expect("at least one round"), sigma_eta: sigma, sigma_v, lambdas, sigmas, converged })
}

#[derive(Debug, Clone, Serialize)]
pub struct PostLassoFit {
    pub beta_tilde: Vec<f64>,
    pub support: Vec<usize>,
    /// Bootstrap standard errors, one per support entry.
    pub se: Vec<f64>,
    pub n_boot: usize,
    /// Resamples whose design was rank deficient and were skipped.
    pub n_boot_failed: usize,
}

/// Pairs bootstrap of an OLS fit: rows are resampled with replacement and
/// the regression refit `n_boot` times, each draw on its own RNG stream.
/// Returns the standard deviation of each coefficient and the number of
/// rank-deficient draws that were skipped.
pub fn pairs_bootstrap_se(x: &DMatrix<f64>, y: &DVector<f64>, n_boot: usize, seed: u64) -> (Vec<f64>, usize) {
    let n = x.nrows();
    let k = x.ncols();
    let draws: Vec<Option<DVector<f64>>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64 + 1);
            let rows: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let xb = select_rows(x, &rows);
            let yb = DVector::from_iterator(n, rows.iter().map(|&i| y[i]));
            ols(&xb, &yb).ok()
        })
        .collect();
    let ok: Vec<&DVector<f64>> = draws.iter().flatten().collect();
    let failed = n_boot - ok.len();
    let se = (0..k)
        .map(|j| {
            let col: Vec<f64> = ok.iter().map(|b| b[j]).collect();
            sample_sd(&col)
        })
        .collect();
    (se, failed)
}

/// OLS refit on a fixed support with pairs-bootstrap standard errors.
pub fn post_lasso(v0: &DVector<f64>, v: &DMatrix<f64>, support: &[usize], n_boot: usize, seed: u64) -> Result<PostLassoFit> {
    let (n, p) = v.shape();
    if v0.len() != n {
        return Err(Error::Dimension("response and design rows differ".into()));
    }
    if let Some(&bad) = support.iter().find(|&&j| j >= p) {
        return Err(Error::InvalidArgument(format!("support index {bad} out of range")));
    }
    let mut beta_tilde = vec![0.0; p];
    if support.is_empty() {
        return Ok(PostLassoFit { beta_tilde, support: Vec::new(), se: Vec::new(), n_boot: 0, n_boot_failed: 0 });
    }
    if support.len() >= n {
        return Err(Error::RankDeficient(format!("support of size {} with {} observations", support.len(), n)));
    }
    let vs = select_columns(v, support);
    let coef = ols(&vs, v0)?;
    for (k, &j) in support.iter().enumerate() {
        beta_tilde[j] = coef[k];
    }
    let (se, n_boot_failed) = pairs_bootstrap_se(&vs, v0, n_boot, seed);
    Ok(PostLassoFit { beta_tilde, support: support.to_vec(), se, n_boot, n_boot_failed })
}
