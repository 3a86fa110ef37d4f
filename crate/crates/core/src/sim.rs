//! Monte Carlo harness: data-generating process, the four experiments,
//! aggregate metrics and the comparison table.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{direct_lasso_baseline, heckman_two_step, ols};
use crate::data::SelectionDataset;
use crate::error::{Error, Result};
use crate::glm::GlmFamily;
use crate::lasso::default_lambda3;
use crate::linalg::select_columns;
use crate::pipeline::{fit_three_stage, Lambda3Choice, LipschitzChoice, PipelineConfig};

/// Share of failed replications above which a cell is flagged.
pub const FAILURE_FLAG_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub k1: usize,
    pub k2: usize,
    pub rho: f64,
    pub sigma2: f64,
    pub n_reps: usize,
    pub seed: u64,
    pub experiments: Vec<u8>,
    pub lambda1_scale: f64,
    pub lambda3_scale: f64,
    pub lipschitz: f64,
    pub family: GlmFamily,
    /// Center the residualized data before the third stage.
    pub demean: bool,
    /// Read the printed outcome-error variance as `sigma2²` instead of `sigma2`.
    pub sigma2_squared: bool,
    /// Half-width of the uniform design distribution.
    pub w_bound: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 88,
            d: 90,
            p: 45,
            k1: 4,
            k2: 2,
            rho: 0.0,
            sigma2: 1.0,
            n_reps: 100,
            seed: 1,
            experiments: vec![1, 2, 3, 4],
            lambda1_scale: 0.5,
            lambda3_scale: 0.2,
            lipschitz: 1.0,
            family: GlmFamily::Probit,
            demean: true,
            sigma2_squared: false,
            w_bound: 2.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n < 2 || self.d == 0 || self.p == 0 {
            return bad("n must be at least 2 and d, p positive".into());
        }
        if self.p > self.d {
            return bad(format!("p = {} exceeds d = {}", self.p, self.d));
        }
        if self.k1 == 0 || self.k1 > self.d || self.k2 == 0 || self.k2 > self.p {
            return bad("need 1 <= k1 <= d and 1 <= k2 <= p".into());
        }
        if self.p < self.d && self.k1 > self.p + 1 {
            return bad("k1 - 1 relevant selection regressors must fit inside x".into());
        }
        if !(self.rho.abs() < 1.0) {
            return bad(format!("|rho| must be below 1, got {}", self.rho));
        }
        if !(self.sigma2 > 0.0) || !(self.w_bound > 0.0) {
            return bad("sigma2 and w_bound must be positive".into());
        }
        if self.n_reps == 0 {
            return bad("n_reps must be positive".into());
        }
        if self.experiments.is_empty() || self.experiments.iter().any(|e| !(1..=4).contains(e)) {
            return bad(format!("experiments must be a nonempty subset of 1..4, got {:?}", self.experiments));
        }
        let (_, cov, var2) = self.error_law();
        if cov * cov > var2 {
            return bad(format!(
                "error covariance is not positive semidefinite (cov {cov}, var {var2}); use the sigma2-squared reading"
            ));
        }
        Ok(())
    }

    /// `(Var ε1, Cov(ε1, ε2), Var ε2)`.
    fn error_law(&self) -> (f64, f64, f64) {
        let var2 = if self.sigma2_squared { self.sigma2 * self.sigma2 } else { self.sigma2 };
        (1.0, self.rho * self.sigma2, var2)
    }

    /// Nonzero positions of θ*: the first `k1 − 1` columns of `w` and the
    /// first column excluded from `x`.
    pub fn theta_support(&self) -> Vec<usize> {
        if self.p < self.d {
            let mut s: Vec<usize> = (0..self.k1 - 1).collect();
            s.push(self.p);
            s
        } else {
            (0..self.k1).collect()
        }
    }

    /// Nonzero positions of β*: the first `k2 − 1` columns and the last one.
    pub fn beta_support(&self) -> Vec<usize> {
        let mut s: Vec<usize> = (0..self.k2 - 1).collect();
        s.push(self.p - 1);
        s
    }

    pub fn theta_star(&self) -> DVector<f64> {
        let mut t = DVector::zeros(self.d);
        for j in self.theta_support() {
            t[j] = 0.5;
        }
        t
    }

    pub fn beta_star(&self) -> DVector<f64> {
        let mut b = DVector::zeros(self.p);
        for j in self.beta_support() {
            b[j] = 1.0;
        }
        b
    }
}

fn rep_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// Draws one replication: uniform `w`, jointly normal `(ε1, ε2)` for every
/// row, selection by the sign of the latent index, `x` the first `p`
/// columns of `w` on selected rows.
pub fn generate_dgp(cfg: &SimConfig, rep_seed: u64) -> Result<(SelectionDataset, DVector<f64>, DVector<f64>)> {
    cfg.validate()?;
    let mut rng = rep_rng(cfg.seed, rep_seed);
    let (n, d, p) = (cfg.n, cfg.d, cfg.p);
    let b = cfg.w_bound;
    let w = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-b..b));
    let theta = cfg.theta_star();
    let beta = cfg.beta_star();
    let (_, cov, var2) = cfg.error_law();
    let resid_sd = (var2 - cov * cov).max(0.0).sqrt();
    let mut e1 = DVector::zeros(n);
    let mut e2 = DVector::zeros(n);
    for i in 0..n {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        e1[i] = z1;
        e2[i] = cov * z1 + resid_sd * z2;
    }
    let latent = &w * &theta + &e1;
    let y1 = latent.map(|l| if l > 0.0 { 1.0 } else { 0.0 });
    let x_full = w.columns(0, p).into_owned();
    let y2_full = &x_full * &beta + e2;
    let ds = SelectionDataset::from_full(w, y1, &x_full, &y2_full)?;
    Ok((ds, theta, beta))
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Fraction of coordinates whose sign (with `sign(0) = 0`) matches the truth.
pub fn selection_percentage(beta_hat: &[f64], beta_star: &[f64]) -> Result<f64> {
    if beta_hat.len() != beta_star.len() || beta_hat.is_empty() {
        return Err(Error::Dimension("coefficient vectors must share a nonzero length".into()));
    }
    let hits = beta_hat.iter().zip(beta_star).filter(|(a, b)| sign(**a) == sign(**b)).count();
    Ok(hits as f64 / beta_hat.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct RepRecord {
    pub rep: usize,
    pub n_selected: usize,
    pub beta: Option<Vec<f64>>,
    pub l2_error: Option<f64>,
    pub selection_pct: Option<f64>,
    pub error: Option<String>,
}

/// Rows a–g of the comparison table.
#[derive(Debug, Clone, Serialize)]
pub struct CellMetrics {
    pub a: f64,
    pub b: f64,
    pub c: Option<f64>,
    pub d: f64,
    pub e: Option<f64>,
    pub f: f64,
    pub g: f64,
}

impl CellMetrics {
    pub fn rows(&self) -> [(char, Option<f64>); 7] {
        [
            ('a', Some(self.a)),
            ('b', Some(self.b)),
            ('c', self.c),
            ('d', Some(self.d)),
            ('e', self.e),
            ('f', Some(self.f)),
            ('g', Some(self.g)),
        ]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub experiment: u8,
    pub n: usize,
    pub rho: f64,
    pub sigma2: f64,
    pub n_reps: usize,
    pub n_failed: usize,
    pub flagged: bool,
    pub metrics: CellMetrics,
    pub records: Vec<RepRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub cells: Vec<CellReport>,
}

fn oracle_dataset(ds: &SelectionDataset, theta_supp: &[usize], beta_supp: &[usize]) -> Result<SelectionDataset> {
    let w = select_columns(ds.w(), theta_supp);
    let x = select_columns(ds.x(), beta_supp);
    SelectionDataset::new(w, ds.y1().clone(), x, ds.y2().clone())
}

fn scatter(p: usize, supp: &[usize], coef: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p];
    for (k, &j) in supp.iter().enumerate() {
        out[j] = coef[k];
    }
    out
}

fn estimate(cfg: &SimConfig, which: u8, ds: &SelectionDataset) -> Result<Vec<f64>> {
    let lambda3 = default_lambda3(cfg.k1, cfg.k2, cfg.d, ds.n_selected(), cfg.lambda3_scale);
    match which {
        1 => {
            let pc = PipelineConfig {
                family: cfg.family,
                lambda1_scale: cfg.lambda1_scale,
                lipschitz: LipschitzChoice::Fixed { lipschitz: cfg.lipschitz },
                lambda3: Lambda3Choice::Fixed { lambda3 },
                demean: cfg.demean,
                n_boot: 0,
                re_dirs: 0,
                ..PipelineConfig::default()
            };
            Ok(fit_three_stage(ds, &pc)?.lasso.beta)
        }
        2 => Ok(direct_lasso_baseline(ds, lambda3)?.beta),
        3 => {
            let bs = cfg.beta_support();
            let small = oracle_dataset(ds, &cfg.theta_support(), &bs)?;
            Ok(scatter(cfg.p, &bs, &heckman_two_step(&small)?.beta))
        }
        4 => {
            let bs = cfg.beta_support();
            let coef = ols(&select_columns(ds.x(), &bs), ds.y2())?;
            Ok(scatter(cfg.p, &bs, coef.as_slice()))
        }
        _ => Err(Error::InvalidArgument(format!("unknown experiment {which}"))),
    }
}

fn aggregate(cfg: &SimConfig, which: u8, records: Vec<RepRecord>) -> CellReport {
    let beta_star = cfg.beta_star();
    let supp = cfg.beta_support();
    let ok: Vec<&Vec<f64>> = records.iter().filter_map(|r| r.beta.as_ref()).collect();
    let m = ok.len() as f64;
    let n_failed = records.len() - ok.len();
    let mean_of = |f: &dyn Fn(&Vec<f64>) -> f64| ok.iter().map(|b| f(b)).sum::<f64>() / m;
    let high_dim = which <= 2;
    let irrelevant: Vec<usize> = (0..cfg.p).filter(|j| !supp.contains(j)).collect();
    let l2 = |b: &Vec<f64>| b.iter().zip(beta_star.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mean_beta: Vec<f64> = (0..cfg.p).map(|j| mean_of(&|b| b[j])).collect();
    let metrics = CellMetrics {
        a: mean_of(&|b| b[supp[0]]),
        b: mean_of(&|b| b[cfg.p - 1]),
        c: (high_dim && !irrelevant.is_empty())
            .then(|| mean_of(&|b| irrelevant.iter().map(|&j| b[j]).sum::<f64>() / irrelevant.len() as f64)),
        d: mean_of(&|b| l2(b)),
        e: high_dim.then(|| mean_of(&|b| selection_percentage(b, beta_star.as_slice()).unwrap_or(f64::NAN))),
        f: mean_of(&|b| l2(b).powi(2)),
        g: mean_beta.iter().zip(beta_star.iter()).map(|(x, y)| (x - y).powi(2)).sum(),
    };
    CellReport {
        experiment: which,
        n: cfg.n,
        rho: cfg.rho,
        sigma2: cfg.sigma2,
        n_reps: records.len(),
        n_failed,
        flagged: n_failed as f64 > FAILURE_FLAG_FRACTION * records.len() as f64,
        metrics,
        records,
    }
}

/// Runs every requested experiment on the same replicated datasets. Failed
/// replications are recorded and excluded from the metrics.
pub fn run_cells(cfg: &SimConfig) -> Result<Vec<CellReport>> {
    cfg.validate()?;
    let experiments: Vec<u8> = cfg.experiments.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let per_rep: Vec<Vec<RepRecord>> = (0..cfg.n_reps)
        .into_par_iter()
        .map(|rep| {
            let drawn = generate_dgp(cfg, rep as u64);
            experiments
                .iter()
                .map(|&which| {
                    let (n_selected, res) = match &drawn {
                        Ok((ds, _, beta_star)) => (ds.n_selected(), estimate(cfg, which, ds).map(|b| (b, beta_star))),
                        Err(e) => (0, Err(Error::InvalidArgument(e.to_string()))),
                    };
                    match res {
                        Ok((b, beta_star)) => {
                            let l2 = b.iter().zip(beta_star.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                            let sp = (which <= 2).then(|| selection_percentage(&b, beta_star.as_slice()).unwrap_or(f64::NAN));
                            RepRecord { rep, n_selected, beta: Some(b), l2_error: Some(l2), selection_pct: sp, error: None }
                        }
                        Err(e) => RepRecord { rep, n_selected, beta: None, l2_error: None, selection_pct: None, error: Some(e.to_string()) },
                    }
                })
                .collect()
        })
        .collect();
    Ok(experiments
        .iter()
        .enumerate()
        .map(|(k, &which)| aggregate(cfg, which, per_rep.iter().map(|r| r[k].clone()).collect()))
        .collect())
}

/// Runs a single experiment.
pub fn run_experiment(cfg: &SimConfig, which: u8) -> Result<CellReport> {
    let mut one = cfg.clone();
    one.experiments = vec![which];
    Ok(run_cells(&one)?.remove(0))
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

/// Rows a–g by one column per cell, rendered to three decimals, with the
/// same numbers as a structured table.
pub fn compare_table(cells: &[CellReport]) -> Result<(String, ComparisonTable)> {
    if cells.is_empty() {
        return Err(Error::Empty("no cells to tabulate".into()));
    }
    let vary_n = cells.iter().any(|c| c.n != cells[0].n);
    let vary_s = cells.iter().any(|c| c.sigma2 != cells[0].sigma2);
    let columns: Vec<String> = cells
        .iter()
        .map(|c| {
            let mut h = format!("Exp {} rho={}", c.experiment, c.rho);
            if vary_n {
                h.push_str(&format!(" n={}", c.n));
            }
            if vary_s {
                h.push_str(&format!(" s2={}", c.sigma2));
            }
            h
        })
        .collect();
    let rows: Vec<String> = "abcdefg".chars().map(String::from).collect();
    let values: Vec<Vec<Option<f64>>> = (0..7).map(|r| cells.iter().map(|c| c.metrics.rows()[r].1).collect()).collect();
    let width = columns.iter().map(|c| c.len()).max().unwrap_or(0).max(8);
    let mut out = format!("{:<4}", "");
    for c in &columns {
        out.push_str(&format!(" {:>width$}", c));
    }
    out.push('\n');
    for (r, name) in rows.iter().enumerate() {
        out.push_str(&format!("{:<4}", format!("({name})")));
        for v in &values[r] {
            let s = v.map_or_else(|| "NA".to_string(), |x| format!("{x:.3}"));
            out.push_str(&format!(" {:>width$}", s));
        }
        out.push('\n');
    }
    Ok((out, ComparisonTable { rows, columns, values }))
}
