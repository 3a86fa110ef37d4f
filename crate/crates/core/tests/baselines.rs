mod common;

use common::{gaussian_matrix, gaussian_vector, max_abs_diff, rng, uniform_matrix};
use hdsel::baselines::{direct_lasso_baseline, heckman_second_stage, heckman_two_step, heckman_with_se, inverse_mills, ols};
use hdsel::bias::{g_hat_closed_form, g_tilde_nls, BiasKind};
use hdsel::data::SelectionDataset;
use hdsel::lasso::default_lambda3;
use hdsel::linalg::select_columns;
use hdsel::lipschitz::residualize;
use hdsel::pipeline::{fit_three_stage, Lambda3Choice, LipschitzChoice, PipelineConfig};
use hdsel::sim::{generate_dgp, SimConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// `φ(u) / Φ(u)` with `Φ(u)` from composite Simpson quadrature of the density.
fn imr_quadrature(u: f64) -> f64 {
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let lo = u - 40.0;
    let m = 200_000;
    let h = (u - lo) / m as f64;
    let mut s = pdf(lo) + pdf(u);
    for k in 1..m {
        let t = lo + k as f64 * h;
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * pdf(t);
    }
    pdf(u) / (s * h / 3.0)
}

#[test]
fn inverse_mills_values() {
    assert!((inverse_mills(0.0) - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-14);
    assert!(inverse_mills(40.0) < 1e-300);
    let at5 = inverse_mills(-5.0);
    assert!((at5 - imr_quadrature(-5.0)).abs() < 1e-9);
    assert!((at5 - 5.1865).abs() < 1e-4);
    for u in [-3.0, -1.0, 0.5, 2.0] {
        assert!((inverse_mills(u) - imr_quadrature(u)).abs() < 1e-9, "u = {u}");
    }
    for u in [-30.5, -50.0, -1e3] {
        let r = inverse_mills(u);
        assert!(r.is_finite() && r > -u && r < -u + 1.0 / -u * 1.01, "u = {u}: {r}");
    }
}

#[test]
fn ols_examples() {
    let mut r = rng(1);
    let x = gaussian_matrix(&mut r, 20, 3);
    let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let y = &x * &b;
    assert!((ols(&x, &y).unwrap() - b).amax() < 1e-12);
    let ones = DMatrix::from_element(5, 1, 1.0);
    let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 10.0]);
    assert!((ols(&ones, &y).unwrap()[0] - 4.0).abs() < 1e-12);
    let dup = DMatrix::from_fn(6, 2, |i, _| i as f64);
    assert!(ols(&dup, &DVector::zeros(6)).is_err());
}

#[test]
fn zeroed_mills_column_is_ols() {
    let mut r = rng(2);
    let x = gaussian_matrix(&mut r, 30, 3);
    let y = gaussian_vector(&mut r, 30);
    let (beta, mills) = heckman_second_stage(&x, &y, &DVector::zeros(30)).unwrap();
    assert_eq!(beta, ols(&x, &y).unwrap());
    assert_eq!(mills, 0.0);
}

fn heckman_cell(rho: f64, n: usize) -> SimConfig {
    SimConfig { rho, n, seed: 77, ..SimConfig::default() }
}

fn low_dim(cfg: &SimConfig, ds: &SelectionDataset) -> SelectionDataset {
    SelectionDataset::new(
        select_columns(ds.w(), &cfg.theta_support()),
        ds.y1().clone(),
        select_columns(ds.x(), &cfg.beta_support()),
        ds.y2().clone(),
    )
    .unwrap()
}

#[test]
fn heckman_probit_converges() {
    let cfg = heckman_cell(0.9, 88);
    for rep in 0..20 {
        let (ds, _, _) = generate_dgp(&cfg, rep).unwrap();
        let fit = heckman_two_step(&low_dim(&cfg, &ds)).unwrap();
        assert!(fit.probit_grad_norm <= hdsel::baselines::PROBIT_TOL);
        assert_eq!(fit.beta.len(), 2);
    }
}

#[test]
fn heckman_detects_selection_on_unobservables() {
    let cfg = heckman_cell(0.9, 2000);
    let (ds, _, _) = generate_dgp(&cfg, 0).unwrap();
    let fit = heckman_two_step(&low_dim(&cfg, &ds)).unwrap();
    assert!((fit.mills_coef - 0.9).abs() < 0.3, "mills {}", fit.mills_coef);
    assert!((fit.beta[0] - 1.0).abs() < 0.1 && (fit.beta[1] - 1.0).abs() < 0.1);
}

#[test]
fn heckman_bootstrap_se_is_deterministic() {
    let cfg = heckman_cell(0.0, 200);
    let (ds, _, _) = generate_dgp(&cfg, 1).unwrap();
    let small = low_dim(&cfg, &ds);
    let a = heckman_with_se(&small, 50, 3).unwrap();
    let b = heckman_with_se(&small, 50, 3).unwrap();
    assert_eq!(a.se, b.se);
    assert_eq!(a.se.as_ref().unwrap().len(), 3);
}

#[test]
fn g_hat_identity_closure() {
    let mut r = rng(3);
    let n = 40;
    let w = uniform_matrix(&mut r, n, 3, 2.0);
    let theta = DVector::from_vec(vec![0.5, 0.5, 0.0]);
    let u = &w * &theta;
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 0.4 * u[i] } else { (0.5 * u[i]).sin() });
    let beta = DVector::from_vec(vec![1.0, -1.0]);
    let y2 = &x * &beta;
    let ds = SelectionDataset::new(w, DVector::from_element(n, 1.0), x, y2).unwrap();
    let b = residualize(&ds, &theta, 1.0).unwrap();
    let g = g_hat_closed_form(&b, &beta).unwrap();
    assert_eq!(g.kind, BiasKind::ClosedForm);
    assert!(g.g_at_sample.iter().all(|v| v.abs() < 1e-10));
    for i in 0..n {
        let fitted: f64 = (0..2).map(|j| b.fits[j + 1].predict(b.index[i]) * beta[j]).sum();
        assert!((g.g_at_sample[i] + fitted - b.fits[0].predict(b.index[i])).abs() < 1e-10);
    }
    let g0 = g_hat_closed_form(&b, &DVector::zeros(2)).unwrap();
    for i in 0..n {
        assert_eq!(g0.g_at_sample[i], b.fits[0].predict(b.index[i]));
    }
}

#[test]
fn g_tilde_examples() {
    let mut r = rng(4);
    let n = 50;
    let w = uniform_matrix(&mut r, n, 2, 2.0);
    let theta = DVector::from_vec(vec![1.0, 0.0]);
    let x = uniform_matrix(&mut r, n, 2, 1.0);
    let beta = DVector::from_vec(vec![2.0, 0.0]);
    let u = &w * &theta;
    let y2 = &x * &beta + u.map(|ui| 0.5 * ui.cos());
    let ds = SelectionDataset::new(w, DVector::from_element(n, 1.0), x.clone(), y2.clone()).unwrap();

    let g = g_tilde_nls(&ds, &theta, &beta, 1.0).unwrap();
    assert_eq!(g.kind, BiasKind::Nls);
    assert!(g.fit.as_ref().unwrap().sse < 1e-18);
    for i in 0..n {
        assert!((g.g_at_sample[i] - 0.5 * u[i].cos()).abs() < 1e-9);
    }

    let g0 = g_tilde_nls(&ds, &theta, &beta, 0.0).unwrap();
    let partial: Vec<f64> = (0..n).map(|i| y2[i] - 2.0 * x[(i, 0)]).collect();
    let mean = partial.iter().sum::<f64>() / n as f64;
    assert!(g0.g_at_sample.iter().all(|v| (v - mean).abs() < 1e-12));

    let noisy = DVector::from_fn(n, |i, _| y2[i] + if i % 2 == 0 { 0.3 } else { -0.3 });
    let ds = SelectionDataset::new(ds.w().clone(), DVector::from_element(n, 1.0), x, noisy).unwrap();
    let big = g_tilde_nls(&ds, &theta, &beta, f64::INFINITY).unwrap();
    assert!(big.fit.unwrap().sse < 1e-18);
}

fn true_bias(cfg: &SimConfig, u: f64) -> f64 {
    cfg.rho * cfg.sigma2 * inverse_mills(u)
}

#[test]
fn g_hat_tracks_mills_bias_and_improves_with_n() {
    let mse_at = |n: usize| {
        let cfg = SimConfig { rho: 0.9, n, seed: 5, ..SimConfig::default() };
        let mut total = 0.0;
        let reps = 20;
        for rep in 0..reps {
            let (ds, theta, beta) = generate_dgp(&cfg, rep).unwrap();
            let b = residualize(&ds, &theta, 1.0).unwrap();
            let g = g_hat_closed_form(&b, &beta).unwrap();
            let m: f64 = g.g_at_sample.iter().zip(b.index.iter()).map(|(gi, &ui)| (gi - true_bias(&cfg, ui)).powi(2)).sum();
            total += m / ds.n_selected() as f64;
        }
        total / reps as f64
    };
    let small = mse_at(88);
    let large = mse_at(800);
    assert!(large < small, "{large} vs {small}");
    assert!(large < 0.1, "{large}");
}

#[test]
fn g_tilde_beats_g_hat_in_most_replications() {
    let cfg = SimConfig { rho: 0.9, seed: 6, ..SimConfig::default() };
    let pc = PipelineConfig {
        lipschitz: LipschitzChoice::Fixed { lipschitz: 1.0 },
        n_boot: 0,
        re_dirs: 0,
        ..PipelineConfig::default()
    };
    let (mut wins, mut total) = (0, 0);
    for rep in 0..100 {
        let (ds, theta_star, _) = generate_dgp(&cfg, rep).unwrap();
        let lambda3 = default_lambda3(cfg.k1, cfg.k2, cfg.d, ds.n_selected(), cfg.lambda3_scale);
        let pc = PipelineConfig { lambda3: Lambda3Choice::Fixed { lambda3 }, ..pc.clone() };
        let Ok(fit) = fit_three_stage(&ds, &pc) else { continue };
        let beta = fit.lasso.beta_vector();
        let theta = fit.glm.index_coefficients();
        let g_hat = g_hat_closed_form(&fit.bundle, &beta).unwrap();
        let g_tilde = g_tilde_nls(&ds, &theta, &beta, 1.0).unwrap();
        let truth: Vec<f64> = (ds.selected_w() * &theta_star).iter().map(|&u| true_bias(&cfg, u)).collect();
        let rms = |g: &[f64]| (g.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64).sqrt();
        total += 1;
        if rms(&g_tilde.g_at_sample) <= rms(&g_hat.g_at_sample) {
            wins += 1;
        }
    }
    assert!(total >= 95);
    assert!(wins as f64 >= 0.6 * total as f64, "{wins} of {total}");
}

#[test]
fn direct_lasso_close_to_pipeline_without_selection_bias() {
    let cfg = SimConfig { rho: 0.0, seed: 7, ..SimConfig::default() };
    let mut gap = 0.0;
    let reps = 100;
    for rep in 0..reps {
        let (ds, _, _) = generate_dgp(&cfg, rep).unwrap();
        let lambda3 = default_lambda3(cfg.k1, cfg.k2, cfg.d, ds.n_selected(), cfg.lambda3_scale);
        let pc = PipelineConfig {
            lipschitz: LipschitzChoice::Fixed { lipschitz: 1.0 },
            lambda3: Lambda3Choice::Fixed { lambda3 },
            n_boot: 0,
            re_dirs: 0,
            ..PipelineConfig::default()
        };
        let a = fit_three_stage(&ds, &pc).unwrap().lasso.beta;
        let b = direct_lasso_baseline(&ds, lambda3).unwrap().beta;
        gap += a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    }
    assert!(gap / reps as f64 <= 0.1, "mean gap {}", gap / reps as f64);
}

#[test]
fn direct_lasso_uses_demeaned_selected_sample() {
    let cfg = SimConfig { seed: 8, ..SimConfig::default() };
    let (ds, _, _) = generate_dgp(&cfg, 0).unwrap();
    let fit = direct_lasso_baseline(&ds, 0.2).unwrap();
    let (xc, _) = hdsel::data::demean_columns(ds.x()).unwrap();
    let (yc, _) = hdsel::data::demean_vector(ds.y2()).unwrap();
    let direct = hdsel::lasso::lasso(&yc, &xc, &hdsel::lasso::LassoConfig::new(0.2)).unwrap();
    assert!(max_abs_diff(&fit.beta, &direct.beta) == 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn inverse_mills_is_one_lipschitz(a in -60.0f64..40.0, b in -60.0f64..40.0) {
        prop_assert!((inverse_mills(a) - inverse_mills(b)).abs() <= (a - b).abs() + 1e-9);
    }
}

#[test]
fn heckman_mills_insignificant_without_selection_on_unobservables() {
    let cfg = SimConfig { rho: 0.0, n: 1000, seed: 9, ..SimConfig::default() };
    let reps = 100;
    let mut quiet = 0;
    for rep in 0..reps {
        let (ds, _, _) = generate_dgp(&cfg, rep).unwrap();
        let fit = heckman_with_se(&low_dim(&cfg, &ds), 100, rep).unwrap();
        let se = *fit.se.as_ref().unwrap().last().unwrap();
        if fit.mills_coef.abs() <= 2.0 * se {
            quiet += 1;
        }
    }
    assert!(quiet as f64 >= 0.9 * reps as f64, "{quiet} of {reps}");
}
