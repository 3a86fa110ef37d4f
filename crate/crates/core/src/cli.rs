//! CSV ingestion, layered run configuration and the command implementations
//! behind the `hdsel` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::baselines::heckman_with_se;
use crate::dantzig::{
    alpha_level, b_n_delta, confidence_intervals, default_b_sigma_v, iterate_xi, l2_sensitivity_bound, scaling_matrix,
    solve_pivotal, XiRule,
};
use crate::data::SelectionDataset;
use crate::error::{Error, Result, StageContext};
use crate::glm::{default_lambda1, fit_l1_glm, GlmFamily};
use crate::pipeline::{choose_lipschitz, fit_three_stage, run_pipeline, stage3_inputs, Lambda3Choice, LipschitzChoice, PipelineConfig};
use crate::sim::{compare_table, run_cells, SimConfig};

/// Column roles. An entry ending in `*` matches every header with that prefix.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnRoles {
    pub y1: String,
    pub y2: String,
    pub w: Vec<String>,
    pub x: Vec<String>,
}

impl Default for ColumnRoles {
    fn default() -> Self {
        Self { y1: "y1".into(), y2: "y2".into(), w: vec!["w*".into()], x: vec!["x*".into()] }
    }
}

fn matches(pattern: &str, header: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => header.starts_with(prefix),
        None => pattern == header,
    }
}

fn resolve(headers: &[String], patterns: &[String], role: &str) -> Result<Vec<usize>> {
    let mut cols = Vec::new();
    for pat in patterns {
        let hits: Vec<usize> = (0..headers.len()).filter(|&k| matches(pat, &headers[k])).collect();
        if hits.is_empty() {
            return Err(Error::Parse(format!("no column matches {role} pattern '{pat}'")));
        }
        for k in hits {
            if !cols.contains(&k) {
                cols.push(k);
            }
        }
    }
    Ok(cols)
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestSummary {
    pub rows: usize,
    pub selected: usize,
    pub w_columns: Vec<String>,
    pub x_columns: Vec<String>,
    /// Rows with `y1 = 0` whose `y2` value was discarded.
    pub dropped_y2: Vec<usize>,
}

/// Reads a selection dataset from a headed CSV file. `y2` may be empty
/// where `y1 = 0`; values given there are dropped with a warning.
pub fn ingest_csv(path: &Path, roles: &ColumnRoles) -> Result<(SelectionDataset, IngestSummary)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .iter()
        .map(String::from)
        .collect();
    let y1_col = resolve(&headers, std::slice::from_ref(&roles.y1), "y1")?[0];
    let y2_col = resolve(&headers, std::slice::from_ref(&roles.y2), "y2")?[0];
    let w_cols = resolve(&headers, &roles.w, "w")?;
    let x_cols = resolve(&headers, &roles.x, "x")?;
    let mut claimed = vec![None::<&str>; headers.len()];
    let mut claim = |k: usize, role: &'static str| -> Result<()> {
        match claimed[k] {
            Some(prev) if prev != role => Err(Error::Parse(format!("column '{}' assigned to both {prev} and {role}", headers[k]))),
            _ => {
                claimed[k] = Some(role);
                Ok(())
            }
        }
    };
    claim(y1_col, "y1")?;
    claim(y2_col, "y2")?;
    for &k in &w_cols {
        claim(k, "w")?;
    }
    for &k in &x_cols {
        claim(k, "x")?;
    }

    let parse = |cell: &str, line: usize, col: usize| -> Result<f64> {
        let v: f64 = cell
            .parse()
            .map_err(|_| Error::Parse(format!("line {line}, column '{}': cannot parse '{cell}' as a number", headers[col])))?;
        if !v.is_finite() {
            return Err(Error::Parse(format!("line {line}, column '{}': non-finite value '{cell}'", headers[col])));
        }
        Ok(v)
    };

    let (mut w, mut x, mut y1, mut y2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut dropped = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
        let cell = |k: usize| rec.get(k).unwrap_or("");
        let s = parse(cell(y1_col), line, y1_col)?;
        if s != 0.0 && s != 1.0 {
            return Err(Error::Parse(format!("line {line}, column '{}': y1 must be 0 or 1, got {s}", headers[y1_col])));
        }
        y1.push(s);
        for &k in &w_cols {
            w.push(parse(cell(k), line, k)?);
        }
        for &k in &x_cols {
            x.push(parse(cell(k), line, k)?);
        }
        let raw = cell(y2_col);
        if s == 1.0 {
            if raw.is_empty() {
                return Err(Error::Parse(format!("line {line}: y2 missing for a selected row")));
            }
            y2.push(parse(raw, line, y2_col)?);
        } else {
            if !raw.is_empty() {
                log::warn!("line {line}: y2 given where y1 = 0; value dropped");
                dropped.push(r);
            }
            y2.push(0.0);
        }
    }
    let n = y1.len();
    if n == 0 {
        return Err(Error::Parse(format!("{}: no data rows", path.display())));
    }
    let w = DMatrix::from_row_slice(n, w_cols.len(), &w);
    let x = DMatrix::from_row_slice(n, x_cols.len(), &x);
    let ds = SelectionDataset::from_full(w, DVector::from_vec(y1), &x, &DVector::from_vec(y2))?;
    let summary = IngestSummary {
        rows: n,
        selected: ds.n_selected(),
        w_columns: w_cols.iter().map(|&k| headers[k].clone()).collect(),
        x_columns: x_cols.iter().map(|&k| headers[k].clone()).collect(),
        dropped_y2: dropped,
    };
    Ok((ds, summary))
}

/// Writes a dataset in the layout [`ingest_csv`] reads with default roles.
/// Values use the shortest representation that round-trips exactly.
pub fn export_csv(ds: &SelectionDataset, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let mut header = vec!["y1".to_string(), "y2".to_string()];
    header.extend((1..=ds.d()).map(|j| format!("w{j}")));
    header.extend((1..=ds.p()).map(|j| format!("x{j}")));
    wtr.write_record(&header).map_err(|e| Error::Io(e.into()))?;
    let mut sel = ds.selected_rows().iter().peekable();
    let mut k = 0;
    let zeros = vec![0.0; ds.p()];
    for i in 0..ds.n() {
        let selected = sel.peek() == Some(&&i);
        let mut row = vec![format!("{}", ds.y1()[i])];
        let xrow: Vec<f64> = if selected {
            sel.next();
            let r = ds.x().row(k).iter().copied().collect();
            row.push(format!("{:?}", ds.y2()[k]));
            k += 1;
            r
        } else {
            row.push(String::new());
            zeros.clone()
        };
        row.extend(ds.w().row(i).iter().map(|v| format!("{v:?}")));
        row.extend(xrow.iter().map(|v| format!("{v:?}")));
        wtr.write_record(&row).map_err(|e| Error::Io(e.into()))?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Fit,
    Simulate,
    Dantzig,
    Heckman,
    CvLipschitz,
}

/// Effective configuration of a run: defaults, then a TOML file, then flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    #[serde(skip)]
    pub output: Option<PathBuf>,
    pub seed: u64,
    pub roles: ColumnRoles,
    pub family: GlmFamily,
    pub lambda1: Option<f64>,
    pub lambda1_scale: f64,
    pub lambda3: Option<f64>,
    pub lambda3_scale: f64,
    /// Use the alternating residual-scale rule for the third-stage penalty.
    pub lambda3_iterative: bool,
    pub lambda3_c: f64,
    pub k1: usize,
    pub k2: usize,
    pub lipschitz: f64,
    pub cv_l: bool,
    pub cv_split: f64,
    pub cv_doublings: usize,
    pub weighted: bool,
    pub demean: bool,
    pub bootstrap: usize,
    pub re_dirs: usize,
    pub xi: Option<f64>,
    pub xi_iterate: bool,
    #[serde(rename = "C")]
    pub c: f64,
    pub a: f64,
    pub c0: f64,
    pub delta_prime: f64,
    pub a0: f64,
    pub b_prime: f64,
    pub b_sigma_v: Option<f64>,
    pub phi_cone: f64,
    pub kappa_dirs: usize,
    pub rhos: Vec<f64>,
    pub sim: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            output: None,
            seed: 1,
            roles: ColumnRoles::default(),
            family: GlmFamily::Probit,
            lambda1: None,
            lambda1_scale: 0.5,
            lambda3: None,
            lambda3_scale: 0.2,
            lambda3_iterative: false,
            lambda3_c: 2.001,
            k1: 4,
            k2: 2,
            lipschitz: 1.0,
            cv_l: false,
            cv_split: 0.7,
            cv_doublings: 10,
            weighted: false,
            demean: true,
            bootstrap: 200,
            re_dirs: 1000,
            xi: None,
            xi_iterate: false,
            c: 1.0,
            a: 1.0,
            c0: 1.01,
            delta_prime: 1.0,
            a0: 1.0,
            b_prime: 0.0,
            b_sigma_v: None,
            phi_cone: 3.0,
            kappa_dirs: 1000,
            rhos: vec![0.0, 0.9],
            sim: SimConfig::default(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hdsel", version, about = "High-dimensional semiparametric sample-selection estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the three-stage estimator with post-Lasso, bias estimates and diagnostics.
    Fit,
    /// Monte Carlo comparison of the four experiments.
    Simulate,
    /// Pivotal Dantzig selector with confidence intervals.
    Dantzig,
    /// Heckman two-step estimator.
    Heckman,
    /// Cross-validate the Lipschitz constant.
    CvLipschitz,
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Command::Fit => CommandKind::Fit,
            Command::Simulate => CommandKind::Simulate,
            Command::Dantzig => CommandKind::Dantzig,
            Command::Heckman => CommandKind::Heckman,
            Command::CvLipschitz => CommandKind::CvLipschitz,
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct Flags {
    /// TOML configuration file; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Structured JSON report destination.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub family: Option<FamilyArg>,
    #[arg(long, global = true)]
    pub lambda1: Option<f64>,
    #[arg(long, global = true)]
    pub lambda3: Option<f64>,
    /// Use the iterative residual-scale rule for lambda3.
    #[arg(long, global = true)]
    pub lambda3_iterative: bool,
    #[arg(long = "lipschitz-L", global = true)]
    pub lipschitz: Option<f64>,
    /// Choose L by doubling cross-validation, starting from --lipschitz-L.
    #[arg(long = "cv-L", global = true)]
    pub cv_l: bool,
    #[arg(long, global = true)]
    pub xi: Option<f64>,
    /// Update xi by the plug-in iteration.
    #[arg(long, global = true)]
    pub xi_iterate: bool,
    #[arg(long = "C", global = true)]
    pub c: Option<f64>,
    #[arg(long, global = true)]
    pub bootstrap: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub experiments: Option<Vec<u8>>,
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    pub rho: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub sigma2: Option<f64>,
    #[arg(long, global = true)]
    pub n: Option<usize>,
    #[arg(long, global = true)]
    pub reps: Option<usize>,
    #[arg(long, global = true)]
    pub k1: Option<usize>,
    #[arg(long, global = true)]
    pub k2: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FamilyArg {
    Logit,
    Probit,
}

impl RunConfig {
    /// Merges a config file and flags over the defaults.
    pub fn from_sources(flags: &Flags) -> Result<Self> {
        let mut cfg = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = &flags.input {
            cfg.input = Some(v.clone());
        }
        if let Some(v) = &flags.output {
            cfg.output = Some(v.clone());
        }
        if let Some(v) = flags.seed {
            cfg.seed = v;
        }
        if let Some(f) = flags.family {
            cfg.family = match f {
                FamilyArg::Logit => GlmFamily::Logit,
                FamilyArg::Probit => GlmFamily::Probit,
            };
        }
        if let Some(v) = flags.lambda1 {
            cfg.lambda1 = Some(v);
        }
        if let Some(v) = flags.lambda3 {
            cfg.lambda3 = Some(v);
        }
        cfg.lambda3_iterative |= flags.lambda3_iterative;
        if let Some(v) = flags.lipschitz {
            cfg.lipschitz = v;
            cfg.sim.lipschitz = v;
        }
        cfg.cv_l |= flags.cv_l;
        if let Some(v) = flags.xi {
            cfg.xi = Some(v);
        }
        cfg.xi_iterate |= flags.xi_iterate;
        if let Some(v) = flags.c {
            cfg.c = v;
        }
        if let Some(v) = flags.bootstrap {
            cfg.bootstrap = v;
        }
        if let Some(v) = &flags.experiments {
            cfg.sim.experiments = v.clone();
        }
        if let Some(v) = &flags.rho {
            cfg.rhos = v.clone();
        }
        if let Some(v) = flags.sigma2 {
            cfg.sim.sigma2 = v;
        }
        if let Some(v) = flags.n {
            cfg.sim.n = v;
        }
        if let Some(v) = flags.reps {
            cfg.sim.n_reps = v;
        }
        if let Some(v) = flags.k1 {
            cfg.k1 = v;
            cfg.sim.k1 = v;
        }
        if let Some(v) = flags.k2 {
            cfg.k2 = v;
            cfg.sim.k2 = v;
        }
        cfg.sim.seed = cfg.seed;
        cfg.sim.family = cfg.family;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.lambda1.is_some_and(|l| !(l >= 0.0)) || self.lambda3.is_some_and(|l| !(l >= 0.0)) {
            return bad("penalties must be nonnegative");
        }
        if !(self.lipschitz >= 0.0) || (self.cv_l && !(self.lipschitz > 0.0)) {
            return bad("the Lipschitz constant must be nonnegative (positive with --cv-L)");
        }
        if self.xi.is_some_and(|x| !(x > 0.0)) || !(self.c > 0.0) {
            return bad("xi and C must be positive");
        }
        if !(self.lambda3_c > 2.0) {
            return bad("lambda3_c must exceed 2");
        }
        if !(self.a >= 1.0) || !(self.c0 > 1.0) || !(self.delta_prime > 0.0) || !(self.phi_cone > 1.0) {
            return bad("need a >= 1, c0 > 1, delta_prime > 0 and phi_cone > 1");
        }
        if self.rhos.is_empty() {
            return bad("at least one rho value is required");
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let lipschitz = if self.cv_l {
            LipschitzChoice::CrossValidated { l0: self.lipschitz, split_fraction: self.cv_split, max_doublings: self.cv_doublings }
        } else {
            LipschitzChoice::Fixed { lipschitz: self.lipschitz }
        };
        let lambda3 = if self.lambda3_iterative {
            Lambda3Choice::Iterative { c: self.lambda3_c, tol: 1e-6 }
        } else if let Some(l) = self.lambda3 {
            Lambda3Choice::Fixed { lambda3: l }
        } else {
            Lambda3Choice::Default { k1: self.k1, k2: self.k2, scale: self.lambda3_scale }
        };
        PipelineConfig {
            family: self.family,
            lambda1: self.lambda1,
            lambda1_scale: self.lambda1_scale,
            lipschitz,
            lambda3,
            weighted: self.weighted,
            demean: self.demean,
            n_boot: self.bootstrap,
            seed: self.seed,
            re_dirs: self.re_dirs,
            ..PipelineConfig::default()
        }
    }

    fn dataset(&self) -> Result<(SelectionDataset, IngestSummary)> {
        let path = self.input.as_ref().ok_or_else(|| Error::InvalidArgument("--input is required for this command".into()))?;
        ingest_csv(path, &self.roles)
    }
}

/// Result of a command: a human-readable summary and the structured report.
pub struct Outcome {
    pub text: String,
    pub report: Value,
}

pub fn execute(kind: CommandKind, cfg: &RunConfig) -> Result<Outcome> {
    let (text, result) = match kind {
        CommandKind::Fit => cmd_fit(cfg)?,
        CommandKind::Simulate => cmd_simulate(cfg)?,
        CommandKind::Dantzig => cmd_dantzig(cfg)?,
        CommandKind::Heckman => cmd_heckman(cfg)?,
        CommandKind::CvLipschitz => cmd_cv_lipschitz(cfg)?,
    };
    let report = json!({ "command": kind, "config": cfg, "result": result });
    Ok(Outcome { text, report })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.4}"))
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<(String, Value)> {
    let (ds, summary) = cfg.dataset()?;
    let report = run_pipeline(&ds, &cfg.pipeline())?;
    let mut text = format!(
        "n = {}, n_s = {}, d = {}, p = {}\nlambda1 = {:.6}, L = {:.6}, lambda3 = {:.6}{}\ntheta support: {:?}\n",
        report.n,
        report.n_selected,
        report.d,
        report.p,
        report.lambda1,
        report.lipschitz,
        report.lambda3,
        report.sigma_eta.map_or(String::new(), |s| format!(", sigma_eta = {s:.6}")),
        report.theta_support.iter().map(|&j| summary.w_columns[j].as_str()).collect::<Vec<_>>(),
    );
    text.push_str(&format!("{:<16} {:>12} {:>12} {:>12}\n", "variable", "lasso", "post-lasso", "boot se"));
    for (k, &j) in report.support.iter().enumerate() {
        text.push_str(&format!(
            "{:<16} {:>12.6} {:>12.6} {:>12.6}\n",
            summary.x_columns[j], report.beta[j], report.post_lasso.beta_tilde[j], report.post_lasso.se.get(k).copied().unwrap_or(f64::NAN)
        ));
    }
    text.push_str(&format!(
        "incoherence = {}, RE probe = {}\n",
        fmt_opt(report.diagnostics.incoherence),
        fmt_opt(report.diagnostics.re_probe)
    ));
    let value = json!({ "data": summary, "fit": report });
    Ok((text, value))
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<(String, Value)> {
    let mut cells = Vec::new();
    for &rho in &cfg.rhos {
        let sim = SimConfig { rho, ..cfg.sim.clone() };
        cells.extend(run_cells(&sim)?);
    }
    cells.sort_by(|a, b| a.experiment.cmp(&b.experiment).then(a.rho.total_cmp(&b.rho)));
    let (mut text, table) = compare_table(&cells)?;
    for c in cells.iter().filter(|c| c.n_failed > 0) {
        text.push_str(&format!(
            "Exp {} rho={}: {} of {} replications failed{}\n",
            c.experiment,
            c.rho,
            c.n_failed,
            c.n_reps,
            if c.flagged { " (flagged)" } else { "" }
        ));
    }
    Ok((text, json!({ "table": table, "cells": cells })))
}

pub fn cmd_heckman(cfg: &RunConfig) -> Result<(String, Value)> {
    let (ds, summary) = cfg.dataset()?;
    let fit = heckman_with_se(&ds, cfg.bootstrap, cfg.seed)?;
    let se = fit.se.clone().unwrap_or_default();
    let mut text = format!("{:<16} {:>12} {:>12}\n", "variable", "estimate", "boot se");
    for (j, name) in summary.x_columns.iter().enumerate() {
        text.push_str(&format!("{:<16} {:>12.6} {:>12.6}\n", name, fit.beta[j], se.get(j).copied().unwrap_or(f64::NAN)));
    }
    text.push_str(&format!("{:<16} {:>12.6} {:>12.6}\n", "mills ratio", fit.mills_coef, se.last().copied().unwrap_or(f64::NAN)));
    Ok((text, json!({ "data": summary, "fit": fit })))
}

pub fn cmd_cv_lipschitz(cfg: &RunConfig) -> Result<(String, Value)> {
    let (ds, summary) = cfg.dataset()?;
    let lambda1 = cfg.lambda1.unwrap_or_else(|| default_lambda1(ds.n(), ds.d(), cfg.lambda1_scale));
    let glm = fit_l1_glm(ds.w(), ds.y1(), lambda1, cfg.family, &Default::default()).stage("stage 1")?;
    let index = ds.selected_w() * glm.index_coefficients();
    let choice = LipschitzChoice::CrossValidated { l0: cfg.lipschitz.max(f64::MIN_POSITIVE), split_fraction: cfg.cv_split, max_doublings: cfg.cv_doublings };
    let (l, run) = choose_lipschitz(&index, ds.x(), ds.y2(), &choice, cfg.seed).stage("lipschitz selection")?;
    let mut text = format!("selected L = {l:.6}\n{:>12} {:>12} {:>14} {:>8}\n", "cap", "attained", "held-out mse", "binding");
    for s in run.iter().flat_map(|r| &r.steps) {
        text.push_str(&format!("{:>12.4} {:>12.6} {:>14.6} {:>8}\n", s.cap, s.fitted_lipschitz, s.test_mse, s.binding));
    }
    Ok((text, json!({ "data": summary, "lambda1": lambda1, "lipschitz": l, "cv": run })))
}

pub fn cmd_dantzig(cfg: &RunConfig) -> Result<(String, Value)> {
    let (ds, summary) = cfg.dataset()?;
    let fit = fit_three_stage(&ds, &cfg.pipeline())?;
    let (v0, v) = stage3_inputs(&fit.bundle, cfg.demean)?;
    let (n_s, p) = v.shape();
    let (v_star, d) = scaling_matrix(ds.x(), &v).stage("scaling")?;
    let b_sigma_v = cfg.b_sigma_v.unwrap_or_else(|| default_b_sigma_v(&v));
    let rule = XiRule { a: cfg.a, c0: cfg.c0, lipschitz: fit.lipschitz, b_sigma_v, b_prime: cfg.b_prime };
    let xi0 = cfg.xi.unwrap_or_else(|| cfg.a * rule.noise_level(p, n_s));
    let (sol, history) = if cfg.xi_iterate {
        let it = iterate_xi(&v0, &v, &v_star, xi0, &rule, cfg.c, 1e-6).stage("pivotal dantzig")?;
        (it.solution, Some(json!({ "steps": it.history, "converged": it.converged, "diverged": it.diverged })))
    } else {
        (solve_pivotal(&v0, &v, &v_star, xi0, cfg.c).stage("pivotal dantzig")?, None)
    };
    let scaled = DMatrix::from_fn(n_s, p, |i, j| v[(i, j)] * d[j]);
    let support = if fit.lasso.support.is_empty() { sol.support() } else { fit.lasso.support.clone() };
    let kappa = l2_sensitivity_bound(&scaled, &support, cfg.phi_cone, cfg.kappa_dirs, cfg.seed)?;
    let eta = &v0 - &v * sol.beta_vector();
    let b_n = b_n_delta(&v, &eta, cfg.delta_prime).ok();
    let alpha = b_n.map_or(f64::NAN, |b| alpha_level(cfg.a, p, b, cfg.delta_prime, cfg.a0));
    let ci = confidence_intervals(&sol, kappa, cfg.k2, fit.lipschitz, b_sigma_v, cfg.b_prime, alpha)?;
    let mut text = format!(
        "xi = {:.6}, C = {}, sigma = {:.6}, objective = {:.6}, status = {:?}\nkappa* probe = {:.6}, alpha = {}, l2 half-width = {}\n",
        sol.xi, sol.c, sol.sigma, sol.objective, sol.status, kappa, fmt_opt(Some(alpha)), fmt_opt(Some(ci.halfwidth_l2))
    );
    text.push_str(&format!("{:<16} {:>12} {:>12}\n", "variable", "estimate", "half-width"));
    for j in sol.support() {
        text.push_str(&format!("{:<16} {:>12.6} {:>12.6}\n", summary.x_columns[j], sol.beta[j], ci.halfwidth_coord[j]));
    }
    Ok((
        text,
        json!({ "data": summary, "lipschitz": fit.lipschitz, "kappa_support": support, "b_n": b_n, "solution": sol, "ci": ci, "xi_iteration": history }),
    ))
}
