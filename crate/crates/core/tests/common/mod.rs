#![allow(dead_code)]

use hdsel::dantzig::{scaling_matrix, SIGMA_FLOOR};
use hdsel::glm::GlmFamily;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize, b: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.gen_range(-b..b))
}

/// `n × p` design with `vᵀv / n = I`.
pub fn orthonormal_design(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    let g = gaussian_matrix(rng, n, p);
    let q = g.qr().q();
    q.columns(0, p).into_owned() * (n as f64).sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Standard normal CDF through the complementary error function.
pub fn phi_cdf(u: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-u / std::f64::consts::SQRT_2)
}

/// Dense QP over all pairwise constraints, solved by Hildreth's dual
/// coordinate ascent.
pub fn hildreth_oracle(u: &[f64], z: &[f64], lipschitz: f64) -> Vec<f64> {
    let n = u.len();
    let mut cons = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let b = lipschitz * (u[i] - u[j]).abs();
            cons.push((i, j, b));
            cons.push((j, i, b));
        }
    }
    let mut mu = vec![0.0; cons.len()];
    let mut f = z.to_vec();
    for _ in 0..2_000_000 {
        let mut delta = 0.0f64;
        for (k, &(i, j, b)) in cons.iter().enumerate() {
            let viol = f[i] - f[j] - b;
            let new = (mu[k] + viol / 2.0).max(0.0);
            let step = new - mu[k];
            if step != 0.0 {
                mu[k] = new;
                f[i] -= step;
                f[j] += step;
                delta = delta.max(step.abs());
            }
        }
        if delta < 1e-15 {
            break;
        }
    }
    f
}

pub fn lipschitz_instance(seed: u64) -> (Vec<f64>, Vec<f64>, f64) {
    let mut r = rng(seed);
    let n = r.gen_range(1..=8);
    let mut u: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
    if n > 2 && r.gen_bool(0.3) {
        u[1] = u[0];
    }
    let z: Vec<f64> = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
    let l = if r.gen_bool(0.1) { 0.0 } else { r.gen_range(0.0..3.0) };
    (u, z, l)
}

pub fn binary_data(seed: u64, n: usize, d: usize, family: GlmFamily) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let mut r = rng(seed);
    let w = gaussian_matrix(&mut r, n, d);
    let theta = DVector::from_fn(d, |j, _| if j < 3 { 0.8 } else { 0.0 });
    let u = &w * &theta;
    let y = u.map(|ui| {
        let prob = match family {
            GlmFamily::Logit => 1.0 / (1.0 + (-ui).exp()),
            GlmFamily::Probit => phi_cdf(ui),
        };
        if r.gen::<f64>() < prob { 1.0 } else { 0.0 }
    });
    (w, y, theta)
}

pub fn nll_oracle(theta: &DVector<f64>, w: &DMatrix<f64>, y: &DVector<f64>, family: GlmFamily) -> f64 {
    let u = w * theta;
    let n = y.len() as f64;
    u.iter()
        .zip(y.iter())
        .map(|(&ui, &yi)| {
            let prob = match family {
                GlmFamily::Logit => 1.0 / (1.0 + (-ui).exp()),
                GlmFamily::Probit => phi_cdf(ui),
            };
            -(yi * prob.ln() + (1.0 - yi) * (1.0 - prob).ln())
        })
        .sum::<f64>()
        / n
}

pub fn soft(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

pub fn dantzig_instance(seed: u64, n: usize, p: usize, noise: f64) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
    let mut r = rng(seed);
    let v = gaussian_matrix(&mut r, n, p);
    let beta = DVector::from_fn(p, |j, _| if j == 0 { 1.0 } else if j == 2 { -0.7 } else { 0.0 });
    let v0 = &v * &beta + gaussian_vector(&mut r, n) * noise;
    let (v_star, _) = scaling_matrix(&(&v * 0.5), &v).unwrap();
    (v0, v, v_star)
}

/// Smallest feasible σ for a given β, and the resulting objective.
pub fn profile_objective(beta: &DVector<f64>, v0: &DVector<f64>, v: &DMatrix<f64>, v_star: &DVector<f64>, xi: f64, c: f64) -> f64 {
    let n = v.nrows() as f64;
    let r = v0 - v * beta;
    let q = r.norm_squared() / n;
    let score = v.tr_mul(&r);
    let g = (0..v.ncols()).map(|j| (score[j] / v_star[j] / n).abs()).fold(0.0, f64::max);
    let sigma = q.sqrt().max(g / xi).max(SIGMA_FLOOR);
    v_star.iter().zip(beta.iter()).map(|(s, b)| s * b.abs()).sum::<f64>() + c * sigma
}

pub fn anchor_objective(v0: &DVector<f64>, v: &DMatrix<f64>, v_star: &DVector<f64>, xi: f64, c: f64) -> f64 {
    profile_objective(&DVector::zeros(v.ncols()), v0, v, v_star, xi, c)
}
