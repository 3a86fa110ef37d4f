//! Second stage: least squares over L-Lipschitz functions of the single index.
//!
//! After sorting by the index and merging ties, the pairwise constraints
//! reduce to bounds on adjacent differences, `f[k+1] - f[k] ∈ [lo_k, hi_k]`.
//! The resulting chain QP is solved exactly by dynamic programming over the
//! derivative of the value function, which stays convex piecewise-linear.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{ResidualBundle, SelectionDataset};
use crate::error::{Error, Result};

/// Fitted values at the distinct sorted index values; prediction
/// interpolates linearly and extends the end values as constants.
#[derive(Debug, Clone, Serialize)]
pub struct LipschitzFit {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
    pub lipschitz: f64,
    pub sse: f64,
    pub monotone: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LipschitzOptions {
    /// Also require the fit to be nondecreasing in the index.
    pub monotone: bool,
}

/// Derivative of a convex piecewise-quadratic value function:
/// `a[k] f + b[k]` on `[breaks[k-1], breaks[k])`.
struct PiecewiseLinear {
    breaks: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl PiecewiseLinear {
    fn zero() -> Self {
        Self { breaks: Vec::new(), a: vec![0.0], b: vec![0.0] }
    }

    fn add_quadratic(&mut self, weight: f64, target: f64) {
        for (a, b) in self.a.iter_mut().zip(self.b.iter_mut()) {
            *a += weight;
            *b -= weight * target;
        }
    }

    fn eval_piece(&self, k: usize, f: f64) -> f64 {
        self.a[k] * f + self.b[k]
    }

    /// Root of the (strictly increasing) derivative.
    fn root(&self) -> f64 {
        let m = self.a.len();
        for k in 0..m {
            let hi = if k + 1 < m { self.breaks[k] } else { f64::INFINITY };
            if k + 1 == m || self.eval_piece(k, hi) >= 0.0 {
                let lo = if k == 0 { f64::NEG_INFINITY } else { self.breaks[k - 1] };
                let r = if self.a[k] > 0.0 { -self.b[k] / self.a[k] } else { lo };
                return r.clamp(lo, hi);
            }
        }
        unreachable!()
    }

    /// Infimal convolution with the indicator of `[lo, hi]`:
    /// `W(f) = min { V(g) : f - g ∈ [lo, hi] }`. The negative part of the
    /// derivative moves by `lo`, the positive part by `hi`, and a flat piece
    /// fills the gap.
    fn convolve_box(&mut self, root: f64, lo: f64, hi: f64) {
        if !lo.is_finite() && !hi.is_finite() {
            *self = Self::zero();
            return;
        }
        let m = self.a.len();
        let r = self.breaks.iter().take_while(|&&x| x <= root).count();

        let mut breaks = Vec::with_capacity(m + 1);
        let mut a = Vec::with_capacity(m + 2);
        let mut b = Vec::with_capacity(m + 2);
        if lo.is_finite() {
            for k in 0..=r {
                a.push(self.a[k]);
                b.push(self.b[k] - self.a[k] * lo);
                breaks.push(if k < r { self.breaks[k] } else { root } + lo);
            }
        }
        a.push(0.0);
        b.push(0.0);
        if hi.is_finite() {
            breaks.push(root + hi);
            for k in r..m {
                a.push(self.a[k]);
                b.push(self.b[k] - self.a[k] * hi);
                if k + 1 < m {
                    breaks.push(self.breaks[k] + hi);
                }
            }
        }

        // drop zero-width pieces
        let pieces = a.len();
        let mut out = Self { breaks: Vec::with_capacity(breaks.len()), a: Vec::with_capacity(pieces), b: Vec::with_capacity(pieces) };
        for k in 0..pieces {
            let left = if k == 0 { f64::NEG_INFINITY } else { breaks[k - 1] };
            let right = if k + 1 == pieces { f64::INFINITY } else { breaks[k] };
            if right <= left {
                continue;
            }
            if !out.a.is_empty() {
                out.breaks.push(left);
            }
            out.a.push(a[k]);
            out.b.push(b[k]);
        }
        *self = out;
    }
}

/// Minimizes `Σ_k weights[k] (f[k] - targets[k])²` subject to
/// `lo[k] ≤ f[k+1] - f[k] ≤ hi[k]` (with `lo[k] ≤ 0 ≤ hi[k]`).
pub(crate) fn solve_chain(targets: &[f64], weights: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let m = targets.len();
    debug_assert_eq!(weights.len(), m);
    debug_assert!(lo.len() + 1 == m && hi.len() + 1 == m || m == 0);
    if m == 0 {
        return Vec::new();
    }
    let mut deriv = PiecewiseLinear::zero();
    let mut minimizers = Vec::with_capacity(m);
    for k in 0..m {
        deriv.add_quadratic(weights[k], targets[k]);
        let r = deriv.root();
        minimizers.push(r);
        if k + 1 < m {
            deriv.convolve_box(r, lo[k], hi[k]);
        }
    }
    let mut f = vec![0.0; m];
    f[m - 1] = minimizers[m - 1];
    for k in (0..m - 1).rev() {
        f[k] = minimizers[k].clamp(f[k + 1] - hi[k], f[k + 1] - lo[k]);
    }
    f
}

fn validate(u: &[f64], z: &[f64], lipschitz: f64) -> Result<()> {
    if u.len() != z.len() {
        return Err(Error::Dimension(format!("index has {} entries, response {}", u.len(), z.len())));
    }
    if u.is_empty() {
        return Err(Error::Empty("lipschitz regression needs at least one point".into()));
    }
    if !u.iter().chain(z).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("lipschitz regression inputs".into()));
    }
    if !(lipschitz >= 0.0) {
        return Err(Error::InvalidArgument(format!("Lipschitz constant must be nonnegative, got {lipschitz}")));
    }
    Ok(())
}

/// Sorted distinct index values, the mean response and multiplicity at
/// each, and for every observation the position of its knot.
fn merge_ties(u: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.sort_by(|&i, &j| u[i].total_cmp(&u[j]));
    let mut knots: Vec<f64> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    let mut knot_of = vec![0usize; u.len()];
    for &i in &order {
        if knots.last() != Some(&u[i]) {
            knots.push(u[i]);
            sums.push(0.0);
            counts.push(0.0);
        }
        let k = knots.len() - 1;
        sums[k] += z[i];
        counts[k] += 1.0;
        knot_of[i] = k;
    }
    let means = sums.iter().zip(&counts).map(|(s, c)| s / c).collect();
    (knots, means, counts, knot_of)
}

/// Least-squares fit of `z` on `u` over L-Lipschitz functions.
pub fn fit_lipschitz(u: &[f64], z: &[f64], lipschitz: f64) -> Result<LipschitzFit> {
    fit_lipschitz_with(u, z, lipschitz, LipschitzOptions::default())
}

pub fn fit_lipschitz_with(u: &[f64], z: &[f64], lipschitz: f64, opts: LipschitzOptions) -> Result<LipschitzFit> {
    validate(u, z, lipschitz)?;
    let (knots, targets, weights, knot_of) = merge_ties(u, z);
    let gaps: Vec<f64> = knots.windows(2).map(|p| lipschitz * (p[1] - p[0])).collect();
    let hi: Vec<f64> = gaps.iter().map(|&g| if g.is_nan() { f64::INFINITY } else { g }).collect();
    let lo: Vec<f64> = if opts.monotone { vec![0.0; hi.len()] } else { hi.iter().map(|&h| -h).collect() };
    let values = solve_chain(&targets, &weights, &lo, &hi);
    let sse = z.iter().zip(&knot_of).map(|(&zi, &k)| (zi - values[k]).powi(2)).sum();
    Ok(LipschitzFit { knots, values, lipschitz, sse, monotone: opts.monotone })
}

impl LipschitzFit {
    /// Linear interpolation between knots, constant beyond the end knots.
    pub fn predict(&self, u0: f64) -> f64 {
        let m = self.knots.len();
        if u0 <= self.knots[0] {
            return self.values[0];
        }
        if u0 >= self.knots[m - 1] {
            return self.values[m - 1];
        }
        match self.knots.binary_search_by(|k| k.total_cmp(&u0)) {
            Ok(k) => self.values[k],
            Err(k) => {
                let (x0, x1) = (self.knots[k - 1], self.knots[k]);
                let (y0, y1) = (self.values[k - 1], self.values[k]);
                let t = (u0 - x0) / (x1 - x0);
                y0 + t * (y1 - y0)
            }
        }
    }

    /// Largest slope between adjacent knots: the smallest Lipschitz
    /// constant the fitted function attains.
    pub fn effective_lipschitz(&self) -> f64 {
        self.knots
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(k, v)| (v[1] - v[0]).abs() / (k[1] - k[0]))
            .fold(0.0, f64::max)
    }
}

/// `max_{i,j} |f_i - f_j| - L |u_i - u_j|` over all pairs.
pub fn max_pairwise_violation(u: &[f64], f: &[f64], lipschitz: f64) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..u.len() {
        for j in (i + 1)..u.len() {
            worst = worst.max((f[i] - f[j]).abs() - lipschitz * (u[i] - u[j]).abs());
        }
    }
    worst.max(0.0)
}

/// One step of the doubling sequence.
#[derive(Debug, Clone, Serialize)]
pub struct CvStep {
    pub cap: f64,
    pub fitted_lipschitz: f64,
    pub test_mse: f64,
    pub binding: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CvResult {
    pub lipschitz: f64,
    pub steps: Vec<CvStep>,
}

/// Relative closeness to the cap at which the cap counts as binding.
const BINDING_FRACTION: f64 = 0.95;

/// Chooses L on a single train/test split. The fit on the training part
/// treats L as free in `[0, cap]`; while the attained constant sits at the
/// cap and the held-out error keeps improving, the cap is doubled. Returns
/// the attained constant of the step with the smallest held-out squared
/// error (earliest step on ties).
pub fn cross_validate_l(
    u: &[f64],
    z: &[f64],
    l0: f64,
    split_fraction: f64,
    max_doublings: usize,
    seed: u64,
) -> Result<CvResult> {
    validate(u, z, l0)?;
    cv_doubling(u, &[z], &[1.0], l0, split_fraction, max_doublings, seed)
}

/// Cross-validates one cap shared by several responses on the same index.
/// Held-out errors are divided by each response's training variance and averaged;
/// a step binds when any response attains the cap.
pub fn cross_validate_l_pooled(
    u: &[f64],
    targets: &[&[f64]],
    l0: f64,
    split_fraction: f64,
    max_doublings: usize,
    seed: u64,
) -> Result<CvResult> {
    if targets.is_empty() {
        return Err(Error::Empty("no responses to cross-validate".into()));
    }
    for z in targets {
        validate(u, z, l0)?;
    }
    let weights: Vec<f64> = targets
        .iter()
        .map(|z| {
            let m = z.iter().sum::<f64>() / z.len() as f64;
            let v = z.iter().map(|x| (x - m).powi(2)).sum::<f64>() / z.len() as f64;
            if v > 0.0 { 1.0 / v } else { 1.0 }
        })
        .collect();
    cv_doubling(u, targets, &weights, l0, split_fraction, max_doublings, seed)
}

fn cv_doubling(
    u: &[f64],
    targets: &[&[f64]],
    weights: &[f64],
    l0: f64,
    split_fraction: f64,
    max_doublings: usize,
    seed: u64,
) -> Result<CvResult> {
    if !(l0 > 0.0) {
        return Err(Error::InvalidArgument("initial cap must be positive".into()));
    }
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction {split_fraction} not in (0, 1)")));
    }
    let n = u.len();
    let n_train = (split_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::InvalidArgument(format!("degenerate split: {n_train} of {n} rows for training")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, test) = order.split_at(n_train);
    let u_tr: Vec<f64> = train.iter().map(|&i| u[i]).collect();

    let mut steps = Vec::new();
    let mut cap = l0;
    for k in 0..=max_doublings {
        let per_target: Vec<(f64, f64)> = targets
            .par_iter()
            .zip(weights)
            .map(|(z, &w)| {
                let z_tr: Vec<f64> = train.iter().map(|&i| z[i]).collect();
                let fit = fit_lipschitz(&u_tr, &z_tr, cap)?;
                let mse = test.iter().map(|&i| (z[i] - fit.predict(u[i])).powi(2)).sum::<f64>() / test.len() as f64;
                Ok((fit.effective_lipschitz(), w * mse))
            })
            .collect::<Result<_>>()?;
        let attained = per_target.iter().map(|t| t.0).fold(0.0, f64::max);
        let test_mse = per_target.iter().map(|t| t.1).sum::<f64>() / targets.len() as f64;
        let binding = attained >= BINDING_FRACTION * cap;
        let improved = steps.last().is_none_or(|prev: &CvStep| test_mse < prev.test_mse);
        steps.push(CvStep { cap, fitted_lipschitz: attained, test_mse, binding });
        if !binding || !improved || k == max_doublings {
            break;
        }
        cap *= 2.0;
    }
    let best = steps
        .iter()
        .min_by(|a, b| a.test_mse.total_cmp(&b.test_mse))
        .expect("at least one step");
    Ok(CvResult { lipschitz: best.fitted_lipschitz, steps })
}

/// Runs the `p + 1` Lipschitz regressions of `y2` and the columns of `x` on
/// the single index `w·θ` over the selected rows.
pub fn residualize(dataset: &SelectionDataset, theta: &DVector<f64>, lipschitz: f64) -> Result<ResidualBundle> {
    if theta.len() != dataset.d() {
        return Err(Error::Dimension(format!("theta has length {}, expected {}", theta.len(), dataset.d())));
    }
    let index = dataset.selected_w() * theta;
    residualize_on_index(&index, dataset.x(), dataset.y2(), lipschitz)
}

/// [`residualize`] with a precomputed index.
pub fn residualize_on_index(
    index: &DVector<f64>,
    x: &DMatrix<f64>,
    y2: &DVector<f64>,
    lipschitz: f64,
) -> Result<ResidualBundle> {
    let (n_s, p) = x.shape();
    if index.len() != n_s || y2.len() != n_s {
        return Err(Error::Dimension("index, x and y2 must share the selected row count".into()));
    }
    let u = index.as_slice();
    let fits: Vec<LipschitzFit> = (0..=p)
        .into_par_iter()
        .map(|j| {
            let col: Vec<f64> = if j == 0 { y2.iter().copied().collect() } else { x.column(j - 1).iter().copied().collect() };
            fit_lipschitz(u, &col, lipschitz)
        })
        .collect::<Result<_>>()?;
    let v0 = DVector::from_fn(n_s, |i, _| y2[i] - fits[0].predict(u[i]));
    let v = DMatrix::from_fn(n_s, p, |i, j| x[(i, j)] - fits[j + 1].predict(u[i]));
    Ok(ResidualBundle { index: index.clone(), fits, v0, v })
}
