//! First stage: ℓ1-penalized binary logit/probit for the selection equation.
//!
//! The objective is `(1/n) Σ [-y_i φ1(w_i·θ) + φ2(w_i·θ)] + λ |θ|_1`, minimized by
//! monotone accelerated proximal gradient with backtracking.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{l1_norm, select_columns};
use crate::normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlmFamily {
    Logit,
    Probit,
}

fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl GlmFamily {
    pub fn phi1(self, u: f64) -> f64 {
        match self {
            GlmFamily::Logit => u,
            GlmFamily::Probit => normal::log_cdf(u) - normal::log_cdf(-u),
        }
    }

    pub fn phi2(self, u: f64) -> f64 {
        match self {
            GlmFamily::Logit => softplus(u),
            GlmFamily::Probit => -normal::log_cdf(-u),
        }
    }

    /// Per-observation negative log-likelihood `-y φ1(u) + φ2(u)`.
    pub fn loss(self, y: f64, u: f64) -> f64 {
        match self {
            GlmFamily::Logit => softplus(u) - y * u,
            // grouped so that neither term multiplies a -inf by zero
            GlmFamily::Probit => {
                let mut l = 0.0;
                if y != 0.0 {
                    l -= y * normal::log_cdf(u);
                }
                if y != 1.0 {
                    l -= (1.0 - y) * normal::log_cdf(-u);
                }
                l
            }
        }
    }

    /// First derivative of [`loss`](Self::loss) in `u`.
    pub fn dloss(self, y: f64, u: f64) -> f64 {
        match self {
            GlmFamily::Logit => logistic(u) - y,
            GlmFamily::Probit => {
                let mut g = 0.0;
                if y != 0.0 {
                    g -= y * normal::inverse_mills(u);
                }
                if y != 1.0 {
                    g += (1.0 - y) * normal::inverse_mills(-u);
                }
                g
            }
        }
    }

    /// Second derivative of [`loss`](Self::loss) in `u` (nonnegative).
    pub fn d2loss(self, y: f64, u: f64) -> f64 {
        match self {
            GlmFamily::Logit => {
                let s = logistic(u);
                s * (1.0 - s)
            }
            GlmFamily::Probit => {
                let mut h = 0.0;
                if y != 0.0 {
                    let l = normal::inverse_mills(u);
                    h += y * l * (u + l);
                }
                if y != 1.0 {
                    let l = normal::inverse_mills(-u);
                    h += (1.0 - y) * l * (l - u);
                }
                h
            }
        }
    }
}

fn check_inputs(theta: &DVector<f64>, w: &DMatrix<f64>, y1: &DVector<f64>) -> Result<()> {
    if w.ncols() != theta.len() {
        return Err(Error::Dimension(format!(
            "theta has length {} but w has {} columns",
            theta.len(),
            w.ncols()
        )));
    }
    if w.nrows() != y1.len() {
        return Err(Error::Dimension("w rows must match y1".into()));
    }
    if w.nrows() == 0 {
        return Err(Error::Empty("no observations".into()));
    }
    if !theta.iter().chain(w.iter()).chain(y1.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("glm inputs".into()));
    }
    Ok(())
}

fn nll_only(u: &DVector<f64>, y1: &DVector<f64>, family: GlmFamily) -> f64 {
    let n = y1.len() as f64;
    u.iter().zip(y1.iter()).map(|(&u, &y)| family.loss(y, u)).sum::<f64>() / n
}

fn nll_grad_from_index(
    w: &DMatrix<f64>,
    u: &DVector<f64>,
    y1: &DVector<f64>,
    family: GlmFamily,
) -> (f64, DVector<f64>) {
    let n = y1.len() as f64;
    let nll = nll_only(u, y1, family);
    let r = DVector::from_iterator(u.len(), u.iter().zip(y1.iter()).map(|(&u, &y)| family.dloss(y, u) / n));
    (nll, w.tr_mul(&r))
}

/// Mean negative log-likelihood and its gradient at `theta`.
pub fn nll_and_gradient(
    theta: &DVector<f64>,
    w: &DMatrix<f64>,
    y1: &DVector<f64>,
    family: GlmFamily,
) -> Result<(f64, DVector<f64>)> {
    check_inputs(theta, w, y1)?;
    let u = w * theta;
    Ok(nll_grad_from_index(w, &u, y1, family))
}

/// Largest violation of the ℓ1 subgradient optimality conditions.
pub fn l1_kkt_residual(theta: &DVector<f64>, grad: &DVector<f64>, lambda: f64) -> f64 {
    theta
        .iter()
        .zip(grad.iter())
        .map(|(&t, &g)| if t != 0.0 { (g + lambda * t.signum()).abs() } else { (g.abs() - lambda).max(0.0) })
        .fold(0.0, f64::max)
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

/// Default first-stage penalty `scale · sqrt(ln d / n)`.
pub fn default_lambda1(n: usize, d: usize, scale: f64) -> f64 {
    scale * ((d as f64).ln() / n as f64).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlmOptions {
    pub tol: f64,
    pub rel_obj_tol: f64,
    pub max_iter: usize,
    pub accelerate: bool,
    /// Refit the selected support by unpenalized maximum likelihood.
    pub post_refit: bool,
    pub record_trace: bool,
}

impl Default for GlmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            rel_obj_tol: 1e-10,
            max_iter: 10_000,
            accelerate: true,
            post_refit: false,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GlmFit {
    pub theta: Vec<f64>,
    pub family: GlmFamily,
    pub lambda1: f64,
    pub nll: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized objective of each accepted iterate, when requested.
    #[serde(skip)]
    pub trace: Vec<f64>,
    /// Support-restricted MLE, when `post_refit` was requested.
    pub refit_theta: Option<Vec<f64>>,
}

impl GlmFit {
    pub fn theta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta)
    }

    /// Coefficients used to build the single index: the refit when present.
    pub fn index_coefficients(&self) -> DVector<f64> {
        DVector::from_column_slice(self.refit_theta.as_deref().unwrap_or(&self.theta))
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.theta.len()).filter(|&j| self.theta[j] != 0.0).collect()
    }
}

fn check_both_classes(y1: &DVector<f64>) -> Result<()> {
    let ones = y1.iter().filter(|&&y| y == 1.0).count();
    if ones == 0 || ones == y1.len() {
        return Err(Error::Separation("y1 contains a single class".into()));
    }
    Ok(())
}

/// Solves the ℓ1-penalized binary-choice program.
pub fn fit_l1_glm(
    w: &DMatrix<f64>,
    y1: &DVector<f64>,
    lambda1: f64,
    family: GlmFamily,
    opts: &GlmOptions,
) -> Result<GlmFit> {
    let d = w.ncols();
    check_inputs(&DVector::zeros(d), w, y1)?;
    if !(lambda1 >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda1 must be nonnegative, got {lambda1}")));
    }
    if lambda1 == 0.0 {
        check_both_classes(y1)?;
    }

    let penalized = |theta: &DVector<f64>, nll: f64| nll + lambda1 * l1_norm(theta);

    let mut x = DVector::<f64>::zeros(d);
    let mut ux = DVector::<f64>::zeros(y1.len());
    let (mut fx_smooth, mut gx) = nll_grad_from_index(w, &ux, y1, family);
    let mut fx = penalized(&x, fx_smooth);
    let mut kkt = l1_kkt_residual(&x, &gx, lambda1);

    let mut y = x.clone();
    let mut uy = ux.clone();
    let mut t_mom: f64 = 1.0;
    let mut step = {
        // 1 / (curvature bound · ‖W‖²/n) as the initial guess
        let col_sq: f64 = w.iter().map(|v| v * v).sum::<f64>() / y1.len() as f64;
        if col_sq > 0.0 { 1.0 / col_sq } else { 1.0 }
    };
    let mut trace = Vec::new();
    if opts.record_trace {
        trace.push(fx);
    }
    let mut history: Vec<f64> = vec![fx];
    let mut iterations = 0;
    let mut stalled = false;

    while kkt > opts.tol && iterations < opts.max_iter {
        iterations += 1;
        let (fy_smooth, gy) = nll_grad_from_index(w, &uy, y1, family);

        // backtracking on the quadratic upper model
        let (z, uz, fz_smooth) = loop {
            let z = DVector::from_iterator(d, (0..d).map(|j| soft_threshold(y[j] - step * gy[j], step * lambda1)));
            let uz = w * &z;
            let fz = nll_only(&uz, y1, family);
            let diff = &z - &y;
            let model = fy_smooth + gy.dot(&diff) + diff.norm_squared() / (2.0 * step);
            if fz <= model + 1e-12 * fy_smooth.abs().max(1.0) || step < 1e-20 {
                break (z, uz, fz);
            }
            step *= 0.5;
        };
        let fz = penalized(&z, fz_smooth);

        let x_prev = x.clone();
        let accepted = fz <= fx;
        if accepted {
            x = z.clone();
            ux = uz.clone();
            fx = fz;
            fx_smooth = fz_smooth;
        }
        if opts.accelerate && accepted {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_mom * t_mom).sqrt());
            y = &x + (&x - &x_prev) * ((t_mom - 1.0) / t_next);
            uy = &ux + (&ux - w * &x_prev) * ((t_mom - 1.0) / t_next);
            t_mom = t_next;
        } else {
            // restart momentum from the incumbent
            t_mom = 1.0;
            y = x.clone();
            uy = ux.clone();
        }
        step *= 1.1;

        gx = nll_grad_from_index(w, &ux, y1, family).1;
        kkt = l1_kkt_residual(&x, &gx, lambda1);
        if opts.record_trace {
            trace.push(fx);
        }
        history.push(fx);
        if lambda1 == 0.0 && x.amax() > 1e8 {
            return Err(Error::Separation("coefficients diverge; data are separable".into()));
        }
        const WINDOW: usize = 50;
        if history.len() > WINDOW {
            let old = history[history.len() - 1 - WINDOW];
            if old - fx <= opts.rel_obj_tol * fx.abs().max(1e-300) {
                stalled = true;
                break;
            }
        }
    }

    let converged = kkt <= opts.tol;
    if !converged && !stalled {
        return Err(Error::NotConverged { solver: "l1 glm", iterations, residual: kkt });
    }

    let refit_theta = if opts.post_refit {
        let support: Vec<usize> = (0..d).filter(|&j| x[j] != 0.0).collect();
        let mut full = vec![0.0; d];
        if !support.is_empty() {
            let ws = select_columns(w, &support);
            let mle = newton_mle(&ws, y1, family, 1e-10, 200)?;
            for (k, &j) in support.iter().enumerate() {
                full[j] = mle.theta[k];
            }
        }
        Some(full)
    } else {
        None
    };

    Ok(GlmFit {
        theta: x.iter().copied().collect(),
        family,
        lambda1,
        nll: fx_smooth,
        kkt_residual: kkt,
        iterations,
        converged,
        trace,
        refit_theta,
    })
}

/// Unpenalized maximum likelihood fit.
#[derive(Debug, Clone, Serialize)]
pub struct MleFit {
    pub theta: Vec<f64>,
    pub nll: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Newton–Raphson with step halving for the unpenalized binary-choice MLE.
pub fn newton_mle(
    w: &DMatrix<f64>,
    y1: &DVector<f64>,
    family: GlmFamily,
    tol: f64,
    max_iter: usize,
) -> Result<MleFit> {
    let (n, d) = w.shape();
    check_inputs(&DVector::zeros(d), w, y1)?;
    check_both_classes(y1)?;
    let nf = n as f64;
    let mut theta = DVector::<f64>::zeros(d);
    let mut u = DVector::<f64>::zeros(n);
    let (mut f, mut g) = nll_grad_from_index(w, &u, y1, family);

    for it in 0..max_iter {
        let gnorm = g.norm();
        if gnorm <= tol {
            return Ok(MleFit { theta: theta.iter().copied().collect(), nll: f, grad_norm: gnorm, iterations: it });
        }
        let h_diag = DVector::from_iterator(n, (0..n).map(|i| family.d2loss(y1[i], u[i]) / nf));
        let mut wh = w.clone();
        for (i, mut row) in wh.row_iter_mut().enumerate() {
            row *= h_diag[i];
        }
        let hess = w.tr_mul(&wh);
        let dir = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&(-&g)),
            None => {
                let ridge = DMatrix::<f64>::identity(d, d) * (1e-8 * hess.diagonal().amax().max(1e-12));
                (hess + ridge)
                    .cholesky()
                    .ok_or_else(|| Error::RankDeficient("probit Hessian".into()))?
                    .solve(&(-&g))
            }
        };
        // below roundoff in f the line search is blind; take the Newton step
        if -g.dot(&dir) <= 1e-13 * f.abs().max(1.0) {
            theta += &dir;
            u = w * &theta;
            let fg = nll_grad_from_index(w, &u, y1, family);
            f = fg.0;
            g = fg.1;
            continue;
        }
        let mut t = 1.0;
        loop {
            let cand = &theta + &dir * t;
            let uc = w * &cand;
            let fc = nll_only(&uc, y1, family);
            if fc.is_finite() && fc <= f + 1e-4 * t * g.dot(&dir) {
                theta = cand;
                u = uc;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                let gnorm = g.norm();
                if gnorm <= tol.sqrt() {
                    return Ok(MleFit { theta: theta.iter().copied().collect(), nll: f, grad_norm: gnorm, iterations: it });
                }
                return Err(Error::NotConverged { solver: "newton mle", iterations: it, residual: gnorm });
            }
        }
        let fg = nll_grad_from_index(w, &u, y1, family);
        f = fg.0;
        g = fg.1;
        if theta.amax() > 1e8 {
            return Err(Error::Separation("MLE coefficients diverge".into()));
        }
    }
    Err(Error::NotConverged { solver: "newton mle", iterations: max_iter, residual: g.norm() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        (w, y)
    }

    #[test]
    fn null_point_values() {
        let (w, y) = random_problem(30, 4, 1);
        for fam in [GlmFamily::Logit, GlmFamily::Probit] {
            let (nll, g) = nll_and_gradient(&DVector::zeros(4), &w, &y, fam).unwrap();
            assert!((nll - 2f64.ln()).abs() < 1e-14);
            if fam == GlmFamily::Logit {
                let expect = -w.tr_mul(&y.add_scalar(-0.5)) / 30.0;
                assert!((g - expect).amax() < 1e-14);
            }
        }
    }

    #[test]
    fn probit_phi_identity() {
        for &u in &[-8.0, -1.0, 0.3, 2.0, 9.0] {
            for y in [0.0, 1.0] {
                let fam = GlmFamily::Probit;
                let direct = -y * fam.phi1(u) + fam.phi2(u);
                assert!((direct - fam.loss(y, u)).abs() < 1e-10 * direct.abs().max(1.0));
            }
        }
    }

    #[test]
    fn loss_derivatives_match_finite_differences() {
        for fam in [GlmFamily::Logit, GlmFamily::Probit] {
            for &u in &[-12.0, -3.0, -0.2, 0.0, 1.7, 6.0] {
                for y in [0.0, 1.0] {
                    let h = 1e-5;
                    let fd = (fam.loss(y, u + h) - fam.loss(y, u - h)) / (2.0 * h);
                    assert!((fd - fam.dloss(y, u)).abs() < 1e-6 * fd.abs().max(1.0), "{fam:?} {u} {y}");
                    let fd2 = (fam.dloss(y, u + h) - fam.dloss(y, u - h)) / (2.0 * h);
                    assert!((fd2 - fam.d2loss(y, u)).abs() < 1e-5 * fd2.abs().max(1.0));
                    assert!(fam.d2loss(y, u) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn large_lambda_gives_zero() {
        let (w, y) = random_problem(40, 6, 2);
        let (_, g0) = nll_and_gradient(&DVector::zeros(6), &w, &y, GlmFamily::Logit).unwrap();
        let lam = g0.amax() * 1.0001;
        let fit = fit_l1_glm(&w, &y, lam, GlmFamily::Logit, &GlmOptions::default()).unwrap();
        assert!(fit.theta.iter().all(|&t| t == 0.0));
        let fit = fit_l1_glm(&w, &y, g0.amax() * 0.9, GlmFamily::Logit, &GlmOptions::default()).unwrap();
        assert!(fit.theta.iter().any(|&t| t != 0.0));
    }

    #[test]
    fn objective_trace_is_monotone() {
        let (w, y) = random_problem(60, 10, 3);
        let opts = GlmOptions { record_trace: true, ..Default::default() };
        let fit = fit_l1_glm(&w, &y, 0.02, GlmFamily::Probit, &opts).unwrap();
        assert!(fit.converged);
        assert!(fit.trace.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn single_class_rejected_without_penalty() {
        let (w, _) = random_problem(10, 2, 4);
        let y = DVector::from_element(10, 1.0);
        assert!(matches!(
            fit_l1_glm(&w, &y, 0.0, GlmFamily::Logit, &GlmOptions::default()),
            Err(Error::Separation(_))
        ));
    }

    #[test]
    fn post_refit_matches_mle_on_support() {
        let (w, y) = random_problem(80, 5, 5);
        let opts = GlmOptions { post_refit: true, ..Default::default() };
        let fit = fit_l1_glm(&w, &y, 0.01, GlmFamily::Probit, &opts).unwrap();
        let refit = fit.refit_theta.clone().unwrap();
        let support = fit.support();
        let mle = newton_mle(&select_columns(&w, &support), &y, GlmFamily::Probit, 1e-10, 100).unwrap();
        for (k, &j) in support.iter().enumerate() {
            assert!((refit[j] - mle.theta[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn default_lambda1_examples() {
        assert!((default_lambda1(88, 90, 0.5) - 0.1130).abs() < 1e-4);
        assert!((default_lambda1(200, 90, 0.5) - 0.0750).abs() < 1e-4);
        assert_eq!(default_lambda1(88, 90, 0.0), 0.0);
    }
}
