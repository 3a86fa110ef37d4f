//! Pivotal Dantzig selector: the conic program, its tuning rules, the ξ
//! iteration, ℓ2-sensitivity probing and the resulting confidence intervals.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT::NonnegativeConeT,
    SupportedConeT::SecondOrderConeT, SupportedConeT::ZeroConeT,
};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::column_rms;
use crate::diagnostics::{cone_search, project_into_cone};
use crate::error::{Error, Result};
use crate::normal;

/// Lower bound on σ keeping the feasible set well posed at `v0 = 0`.
pub const SIGMA_FLOOR: f64 = 1e-12;
/// Default weight on σ in the objective.
pub const DEFAULT_C: f64 = 1.0;
const MAX_XI_ROUNDS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DantzigStatus {
    Optimal,
    /// The conic solver stopped at reduced accuracy.
    Inexact,
    /// The conic solver failed; the anchor point is returned.
    Fallback,
}

#[derive(Debug, Clone, Serialize)]
pub struct DantzigSolution {
    pub beta: Vec<f64>,
    pub sigma: f64,
    pub xi: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub v_star: Vec<f64>,
    pub d_diag: Vec<f64>,
    pub slack_inf: f64,
    pub slack_l2: f64,
    pub objective: f64,
    pub status: DantzigStatus,
}

impl DantzigSolution {
    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.beta.len()).filter(|&j| self.beta[j] != 0.0).collect()
    }

    pub fn beta_l1(&self) -> f64 {
        self.beta.iter().map(|b| b.abs()).sum()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PivotalCI {
    pub kappa_star: f64,
    pub halfwidth_l2: f64,
    pub halfwidth_coord: Vec<f64>,
    pub alpha: f64,
    /// False when the correction factors are nonpositive; widths are then infinite.
    pub bounded: bool,
}

/// `v*_j = max_i max(|2 x_ij|, |v_ij|)` and `D = diag(1 / v*)`.
pub fn scaling_matrix(x: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if x.shape() != v.shape() {
        return Err(Error::Dimension(format!("x is {:?} but v is {:?}", x.shape(), v.shape())));
    }
    let p = v.ncols();
    let v_star = DVector::from_fn(p, |j, _| {
        x.column(j)
            .iter()
            .zip(v.column(j).iter())
            .fold(0.0_f64, |m, (a, b)| m.max((2.0 * a).abs()).max(b.abs()))
    });
    if let Some(j) = (0..p).find(|&j| !(v_star[j] > 0.0)) {
        return Err(Error::InvalidArgument(format!("column {j} is identically zero; scaling undefined")));
    }
    let d = v_star.map(|s| 1.0 / s);
    Ok((v_star, d))
}

fn dense_to_csc(m: &DMatrix<f64>) -> CscMatrix<f64> {
    let (rows, cols) = m.shape();
    let mut colptr = Vec::with_capacity(cols + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for j in 0..cols {
        for i in 0..rows {
            let x = m[(i, j)];
            if x != 0.0 {
                rowval.push(i);
                nzval.push(x);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(rows, cols, colptr, rowval, nzval)
}

struct Feasibility {
    q: f64,
    g: f64,
}

fn residual_stats(v0: &DVector<f64>, v: &DMatrix<f64>, d: &DVector<f64>, beta: &DVector<f64>) -> Feasibility {
    let n = v.nrows() as f64;
    let r = v0 - v * beta;
    let score = v.tr_mul(&r).component_mul(d) / n;
    Feasibility { q: r.norm_squared() / n, g: score.amax() }
}

fn objective(v_star: &DVector<f64>, beta: &DVector<f64>, sigma: f64, c: f64) -> f64 {
    v_star.iter().zip(beta.iter()).map(|(s, b)| s * b.abs()).sum::<f64>() + c * sigma
}

/// Solves `min Σ v*_j |β_j| + Cσ` over
/// `{(1/n)|D vᵀ(v0 − vβ)|_∞ ≤ ξσ, (1/n)|v0 − vβ|² ≤ σ², σ ≥ floor}` as a
/// second-order cone program. The response is normalized to unit RMS
/// before the solve, σ is raised afterwards to restore exact feasibility,
/// and the anchor `β = 0` is returned whenever it scores no worse.
pub fn solve_pivotal(v0: &DVector<f64>, v: &DMatrix<f64>, v_star: &DVector<f64>, xi: f64, c: f64) -> Result<DantzigSolution> {
    let (n, p) = v.shape();
    if v0.len() != n || v_star.len() != p {
        return Err(Error::Dimension("v0, v and v_star disagree".into()));
    }
    if n == 0 {
        return Err(Error::Empty("no observations".into()));
    }
    if !(xi > 0.0) || !(c > 0.0) || !xi.is_finite() || !c.is_finite() {
        return Err(Error::InvalidArgument(format!("need xi > 0 and C > 0 (got {xi}, {c})")));
    }
    if v_star.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument("scaling entries must be positive".into()));
    }
    let d = v_star.map(|s| 1.0 / s);
    let nf = n as f64;
    let rms = v0.norm() / nf.sqrt();

    let finish = |beta: DVector<f64>, sigma: f64, status: DantzigStatus| {
        let f = residual_stats(v0, v, &d, &beta);
        DantzigSolution {
            objective: objective(v_star, &beta, sigma, c),
            slack_inf: xi * sigma - f.g,
            slack_l2: sigma * sigma - f.q,
            beta: beta.iter().copied().collect(),
            sigma,
            xi,
            c,
            v_star: v_star.iter().copied().collect(),
            d_diag: d.iter().copied().collect(),
            status,
        }
    };

    if rms == 0.0 {
        return Ok(finish(DVector::zeros(p), SIGMA_FLOOR, DantzigStatus::Optimal));
    }

    let zero = DVector::zeros(p);
    let anchor_stats = residual_stats(v0, v, &d, &zero);
    let anchor_sigma = anchor_stats.q.sqrt().max(anchor_stats.g / xi).max(SIGMA_FLOOR);
    let anchor_obj = objective(v_star, &zero, anchor_sigma, c);

    let y = v0 / rms;
    let (solved, status) = solve_conic(&y, v, &d, v_star, xi, c);
    let Some(beta_n) = solved else {
        return Ok(finish(zero, anchor_sigma, DantzigStatus::Fallback));
    };
    let mut beta = beta_n * rms;
    let scale = beta.iter().zip(v_star.iter()).fold(0.0_f64, |m, (b, s)| m.max(b.abs() * s));
    for (b, s) in beta.iter_mut().zip(v_star.iter()) {
        if b.abs() * s <= 1e-9 * scale.max(rms) {
            *b = 0.0;
        }
    }
    let f = residual_stats(v0, v, &d, &beta);
    let sigma = f.q.sqrt().max(f.g / xi).max(SIGMA_FLOOR);
    if objective(v_star, &beta, sigma, c) >= anchor_obj {
        return Ok(finish(zero, anchor_sigma, status));
    }
    Ok(finish(beta, sigma, status))
}

/// Variables `[β, t, σ]`, with `t ≥ |β|` componentwise.
fn solve_conic(y: &DVector<f64>, v: &DMatrix<f64>, d: &DVector<f64>, v_star: &DVector<f64>, xi: f64, c: f64) -> (Option<DVector<f64>>, DantzigStatus) {
    let (n, p) = v.shape();
    let nf = n as f64;
    let nv = 2 * p + 1;
    let sig = 2 * p;
    let gram = DMatrix::from_fn(p, p, |k, j| d[k] * v.column(k).dot(&v.column(j)) / nf);
    let score = DVector::from_fn(p, |k, _| d[k] * v.column(k).dot(y) / nf);

    let n_lin = 4 * p + 1;
    let rows = n_lin + n + 1;
    let mut a = DMatrix::<f64>::zeros(rows, nv);
    let mut b = vec![0.0; rows];
    for j in 0..p {
        a[(j, j)] = 1.0;
        a[(j, p + j)] = -1.0;
        a[(p + j, j)] = -1.0;
        a[(p + j, p + j)] = -1.0;
    }
    for k in 0..p {
        let (lo, hi) = (2 * p + k, 3 * p + k);
        for j in 0..p {
            a[(lo, j)] = -gram[(k, j)];
            a[(hi, j)] = gram[(k, j)];
        }
        a[(lo, sig)] = -xi;
        a[(hi, sig)] = -xi;
        b[lo] = -score[k];
        b[hi] = score[k];
    }
    a[(4 * p, sig)] = -1.0;
    b[4 * p] = -SIGMA_FLOOR;
    a[(n_lin, sig)] = -1.0;
    let root_n = nf.sqrt();
    for i in 0..n {
        for j in 0..p {
            a[(n_lin + 1 + i, j)] = v[(i, j)] / root_n;
        }
        b[n_lin + 1 + i] = y[i] / root_n;
    }

    let mut q = vec![0.0; nv];
    for j in 0..p {
        q[p + j] = v_star[j];
    }
    q[sig] = c;
    let pmat = CscMatrix::zeros((nv, nv));
    let amat = dense_to_csc(&a);
    let cones = [NonnegativeConeT(n_lin), SecondOrderConeT(n + 1)];
    let settings = DefaultSettings::<f64> {
        verbose: false,
        tol_gap_abs: 1e-10,
        tol_gap_rel: 1e-10,
        tol_feas: 1e-10,
        max_iter: 500,
        ..DefaultSettings::default()
    };
    let Ok(mut solver) = DefaultSolver::new(&pmat, &q, &amat, &b, &cones, settings) else {
        return (None, DantzigStatus::Fallback);
    };
    solver.solve();
    let status = match solver.solution.status {
        SolverStatus::Solved => DantzigStatus::Optimal,
        SolverStatus::AlmostSolved | SolverStatus::MaxIterations | SolverStatus::InsufficientProgress => DantzigStatus::Inexact,
        _ => return (None, DantzigStatus::Fallback),
    };
    let x = &solver.solution.x;
    if x.iter().any(|z| !z.is_finite()) {
        return (None, DantzigStatus::Fallback);
    }
    (Some(DVector::from_fn(p, |j, _| x[j])), status)
}

/// `n^{δ'/(4+2δ')} · min_j sqrt(mean(X²)) / mean(|X|^{2+δ'})^{1/(2+δ')}` with
/// `X_i = v_ij η̂_i`.
pub fn b_n_delta(v: &DMatrix<f64>, eta_hat: &DVector<f64>, delta_prime: f64) -> Result<f64> {
    let (n, p) = v.shape();
    if eta_hat.len() != n {
        return Err(Error::Dimension("eta_hat length differs from rows of v".into()));
    }
    if !(delta_prime > 0.0) {
        return Err(Error::InvalidArgument("delta' must be positive".into()));
    }
    if n == 0 || p == 0 {
        return Err(Error::Empty("b_n needs a nonempty design".into()));
    }
    let nf = n as f64;
    let power = 2.0 + delta_prime;
    let mut best = f64::INFINITY;
    for j in 0..p {
        let (mut m2, mut mq) = (0.0, 0.0);
        for i in 0..n {
            let x = (v[(i, j)] * eta_hat[i]).abs();
            m2 += x * x;
            mq += x.powf(power);
        }
        if m2 == 0.0 {
            return Err(Error::InvalidArgument(format!("v_j * eta is identically zero for column {j}")));
        }
        let ratio = (m2 / nf).sqrt() / (mq / nf).powf(1.0 / power);
        best = best.min(ratio);
    }
    Ok(nf.powf(delta_prime / (4.0 + 2.0 * delta_prime)) * best)
}

/// Confidence level from the self-normalized moderate-deviation bound, with
/// the leading multiplier taken as `p`. Clipped to `[0, 1]`.
pub fn alpha_level(a: f64, p: usize, b_n: f64, delta_prime: f64, a0: f64) -> f64 {
    let pf = p as f64;
    let t = a * (2.0 * pf.ln()).sqrt();
    let gauss = 2.0 * pf * normal::cdf(-t);
    let moderate = 2.0 * a0 * (1.0 + t).powf(1.0 + delta_prime) / (pf.powf(a * a - 1.0) * b_n.powf(2.0 + delta_prime));
    let alpha = gauss + moderate;
    if alpha.is_nan() {
        1.0
    } else {
        alpha.clamp(0.0, 1.0)
    }
}

/// `a · max{c0 sqrt(ln p / n), Q̂^{-1/2} |β|₁ L b √B′ / min v*}`. The second
/// branch is dropped when any of its inputs is unavailable (nonpositive).
#[allow(clippy::too_many_arguments)]
pub fn default_xi(
    p: usize,
    n_s: usize,
    q_hat_beta: f64,
    beta_l1: f64,
    lipschitz: f64,
    b_sigma_v: f64,
    b_prime: f64,
    v_star_min: f64,
    a: f64,
    c0: f64,
) -> f64 {
    let noise = c0 * ((p as f64).ln() / n_s as f64).sqrt();
    let first_stage = lipschitz * b_sigma_v * b_prime.sqrt();
    let bias = if q_hat_beta > 0.0 && v_star_min > 0.0 && first_stage > 0.0 {
        beta_l1 * first_stage / (q_hat_beta.sqrt() * v_star_min)
    } else if q_hat_beta == 0.0 && beta_l1 > 0.0 && first_stage > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    a * noise.max(bias)
}

/// `b(σ̂_v) = 2 max_j column_rms(v)`.
pub fn default_b_sigma_v(v: &DMatrix<f64>) -> f64 {
    2.0 * column_rms(v).amax()
}

/// Constants of the ξ rule shared by the iteration and the intervals.
#[derive(Debug, Clone, Serialize)]
pub struct XiRule {
    pub a: f64,
    pub c0: f64,
    pub lipschitz: f64,
    pub b_sigma_v: f64,
    pub b_prime: f64,
}

impl XiRule {
    pub fn noise_level(&self, p: usize, n_s: usize) -> f64 {
        self.c0 * ((p as f64).ln() / n_s as f64).sqrt()
    }

    pub fn evaluate(&self, p: usize, n_s: usize, q_hat: f64, beta_l1: f64, v_star_min: f64) -> f64 {
        default_xi(p, n_s, q_hat, beta_l1, self.lipschitz, self.b_sigma_v, self.b_prime, v_star_min, self.a, self.c0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct XiStep {
    pub xi: f64,
    pub beta_l1: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct XiIteration {
    pub solution: DantzigSolution,
    pub history: Vec<XiStep>,
    pub converged: bool,
    pub diverged: bool,
}

/// Alternates pivotal solves with plug-in ξ updates until successive
/// coefficient vectors differ by at most `tol` in ℓ2, or 20 rounds.
pub fn iterate_xi(v0: &DVector<f64>, v: &DMatrix<f64>, v_star: &DVector<f64>, xi0: f64, rule: &XiRule, c: f64, tol: f64) -> Result<XiIteration> {
    if !(xi0 > 0.0) {
        return Err(Error::InvalidArgument("xi0 must be positive".into()));
    }
    let (n, p) = v.shape();
    let v_star_min = v_star.min();
    let mut xi = xi0;
    let mut history = Vec::new();
    let mut prev: Option<DVector<f64>> = None;
    let mut converged = false;
    let mut diverged = false;
    let mut sol = solve_pivotal(v0, v, v_star, xi, c)?;
    for round in 0..MAX_XI_ROUNDS {
        if round > 0 {
            sol = solve_pivotal(v0, v, v_star, xi, c)?;
        }
        history.push(XiStep { xi, beta_l1: sol.beta_l1(), objective: sol.objective });
        let beta = sol.beta_vector();
        if let Some(b) = &prev {
            if (&beta - b).norm() <= tol {
                converged = true;
                break;
            }
        }
        let q_hat = (v0 - v * &beta).norm_squared() / n as f64;
        let next = rule.evaluate(p, n, q_hat, sol.beta_l1(), v_star_min);
        if !next.is_finite() || next > 1e6 * xi0 {
            diverged = true;
            break;
        }
        if next == xi {
            converged = true;
            break;
        }
        prev = Some(beta);
        xi = next;
    }
    Ok(XiIteration { solution: sol, history, converged, diverged })
}

/// Sampled infimum of `(1/n)|vᵀvΔ|_∞` over unit `Δ` in the cone
/// `|Δ_{Sᶜ}|₁ ≤ φ|Δ_S|₁`, refined by linear programs on the sign pieces of
/// the cone. An upper bound on the ℓ2-sensitivity.
pub fn l2_sensitivity_bound(v: &DMatrix<f64>, support: &[usize], phi_cone: f64, n_dirs: usize, seed: u64) -> Result<f64> {
    let (n, p) = v.shape();
    if n_dirs == 0 {
        return Err(Error::InvalidArgument("n_dirs must be at least 1".into()));
    }
    if !(phi_cone > 1.0) {
        return Err(Error::InvalidArgument("cone parameter must exceed 1".into()));
    }
    if let Some(&j) = support.iter().find(|&&j| j >= p) {
        return Err(Error::InvalidArgument(format!("support index {j} out of range")));
    }
    if support.is_empty() {
        return Ok(f64::INFINITY);
    }
    let gram = v.tr_mul(v) / n as f64;
    let (mut best, start) = cone_search(p, support, phi_cone, n_dirs, seed, |d| (&gram * d).amax());
    let mut starts = vec![start];
    if support.len() <= MAX_SIGN_ENUMERATION {
        for mask in 0..(1usize << (support.len() - 1)) {
            let mut d = DVector::zeros(p);
            for (k, &j) in support.iter().enumerate() {
                d[j] = if k > 0 && mask & (1 << (k - 1)) != 0 { -1.0 } else { 1.0 };
            }
            starts.push(d.normalize());
        }
    }
    for d in starts {
        best = best.min(refine_sensitivity(&gram, support, phi_cone, d));
    }
    Ok(best)
}

const MAX_SIGN_ENUMERATION: usize = 6;

/// Successive linear programs on the cone piece fixed by the signs of
/// `Δ_S`, with the unit sphere replaced by the tangent plane at the
/// current direction. Each accepted step lowers `|GΔ|_∞ / |Δ|₂`.
fn refine_sensitivity(gram: &DMatrix<f64>, support: &[usize], phi: f64, start: DVector<f64>) -> f64 {
    let p = gram.nrows();
    let mut mask = vec![false; p];
    for &j in support {
        mask[j] = true;
    }
    let comp: Vec<usize> = (0..p).filter(|&j| !mask[j]).collect();
    let eval = |d: &DVector<f64>| (gram * d).amax() / d.norm();
    let mut d = start;
    let mut val = eval(&d);
    let m = comp.len();
    let nv = p + 1 + m;
    let t = p;
    let rows = 1 + 2 * p + support.len() + 2 * m + 1;
    let settings = || DefaultSettings::<f64> { verbose: false, max_iter: 200, ..DefaultSettings::default() };
    for _ in 0..30 {
        let c = &d / d.norm();
        let mut a = DMatrix::<f64>::zeros(rows, nv);
        let mut b = vec![0.0; rows];
        for j in 0..p {
            a[(0, j)] = c[j];
        }
        b[0] = 1.0;
        for k in 0..p {
            for j in 0..p {
                a[(1 + k, j)] = gram[(k, j)];
                a[(1 + p + k, j)] = -gram[(k, j)];
            }
            a[(1 + k, t)] = -1.0;
            a[(1 + p + k, t)] = -1.0;
        }
        let mut r = 1 + 2 * p;
        let signs: Vec<f64> = support.iter().map(|&j| if c[j] < 0.0 { -1.0 } else { 1.0 }).collect();
        for (&j, &s) in support.iter().zip(&signs) {
            a[(r, j)] = -s;
            r += 1;
        }
        for (i, &j) in comp.iter().enumerate() {
            a[(r, j)] = 1.0;
            a[(r, t + 1 + i)] = -1.0;
            a[(r + 1, j)] = -1.0;
            a[(r + 1, t + 1 + i)] = -1.0;
            r += 2;
        }
        for i in 0..m {
            a[(r, t + 1 + i)] = 1.0;
        }
        for (&j, &s) in support.iter().zip(&signs) {
            a[(r, j)] = -phi * s;
        }
        let mut q = vec![0.0; nv];
        q[t] = 1.0;
        let pmat = CscMatrix::zeros((nv, nv));
        let cones = [ZeroConeT(1), NonnegativeConeT(rows - 1)];
        let Ok(mut solver) = DefaultSolver::new(&pmat, &q, &dense_to_csc(&a), &b, &cones, settings()) else {
            break;
        };
        solver.solve();
        if !matches!(solver.solution.status, SolverStatus::Solved | SolverStatus::AlmostSolved) {
            break;
        }
        let cand = DVector::from_fn(p, |j, _| solver.solution.x[j]);
        let Some(cand) = project_into_cone(cand, support, &comp, phi) else {
            break;
        };
        let cand_val = eval(&cand);
        if !(cand_val < val * (1.0 - 1e-9)) {
            break;
        }
        val = cand_val;
        d = cand;
    }
    val
}

/// Half-widths of the non-asymptotic ℓ2 and coordinatewise confidence sets
/// around a pivotal solution.
#[allow(clippy::too_many_arguments)]
pub fn confidence_intervals(
    sol: &DantzigSolution,
    kappa_star: f64,
    k2: usize,
    lipschitz: f64,
    b_sigma_v: f64,
    b_prime: f64,
    alpha: f64,
) -> Result<PivotalCI> {
    if !(kappa_star >= 0.0) || !(b_prime >= 0.0) || !(lipschitz >= 0.0) || !(b_sigma_v >= 0.0) {
        return Err(Error::InvalidArgument("CI inputs must be nonnegative".into()));
    }
    let p = sol.v_star.len();
    let v_min = sol.v_star.iter().copied().fold(f64::INFINITY, f64::min);
    let lead = lipschitz * b_sigma_v * b_prime.sqrt();
    let numerator = lead / v_min * sol.beta_l1() + 2.0 * sol.xi * sol.sigma;
    let shrink = 1.0 - sol.xi * sol.xi / kappa_star;
    let correction = 1.0 - lipschitz * b_sigma_v * (k2 as f64 * b_prime).sqrt() / (v_min * v_min) / kappa_star / shrink;
    let bounded = kappa_star > 0.0 && shrink > 0.0 && correction > 0.0;
    let (l2, coord) = if bounded {
        let l2 = numerator / (kappa_star * shrink * correction);
        (l2, sol.v_star.iter().map(|s| l2 / s).collect())
    } else {
        (f64::INFINITY, vec![f64::INFINITY; p])
    };
    Ok(PivotalCI { kappa_star, halfwidth_l2: l2, halfwidth_coord: coord, alpha, bounded })
}
