//! Sample diagnostics for the third-stage design: mutual incoherence and a
//! restricted-eigenvalue probe over the cone `|Δ_{Sᶜ}|₁ ≤ 3|Δ_S|₁`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Cone aperture used by the restricted-eigenvalue probe.
pub const RE_CONE: f64 = 3.0;

fn complement(p: usize, support: &[usize]) -> Vec<usize> {
    let mut mask = vec![false; p];
    for &j in support {
        mask[j] = true;
    }
    (0..p).filter(|&j| !mask[j]).collect()
}

fn check_support(p: usize, support: &[usize]) -> Result<()> {
    let mut seen = vec![false; p];
    for &j in support {
        if j >= p {
            return Err(Error::InvalidArgument(format!("support index {j} out of range for {p} columns")));
        }
        if seen[j] {
            return Err(Error::InvalidArgument(format!("support index {j} repeated")));
        }
        seen[j] = true;
    }
    Ok(())
}

/// `‖Σ̂_{KᶜK} Σ̂_{KK}⁻¹‖_∞` with `Σ̂ = vᵀv / n`, as a max absolute row sum.
pub fn incoherence_stat(v: &DMatrix<f64>, support: &[usize]) -> Result<f64> {
    let (n, p) = v.shape();
    check_support(p, support)?;
    if support.is_empty() {
        return Ok(0.0);
    }
    let gram = v.tr_mul(v) / n as f64;
    let k = support.len();
    let comp = complement(p, support);
    let skk = DMatrix::from_fn(k, k, |a, b| gram[(support[a], support[b])]);
    let chol = skk
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("Gram block on the support is singular".into()))?;
    let scale = (0..k).map(|a| gram[(support[a], support[a])]).fold(0.0, f64::max);
    let lmin = chol.l().diagonal().iter().fold(f64::INFINITY, |m, d| m.min(d * d));
    if lmin <= 1e-12 * scale {
        return Err(Error::RankDeficient("Gram block on the support is singular".into()));
    }
    // rows of Σ_{KᶜK} Σ_{KK}⁻¹ are solves against Σ_{KK}
    let skc = DMatrix::from_fn(k, comp.len(), |a, b| gram[(support[a], comp[b])]);
    let m = chol.solve(&skc);
    Ok((0..comp.len())
        .map(|c| m.column(c).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max))
}

/// Draws a unit direction in `{|Δ_{Sᶜ}|₁ ≤ φ|Δ_S|₁}`. The off-support part
/// has a random sparsity pattern and fills a random fraction of the budget,
/// with half the draws on the cone boundary.
pub(crate) fn sample_cone_direction<R: Rng>(rng: &mut R, p: usize, support: &[usize], comp: &[usize], phi: f64) -> DVector<f64> {
    let mut d = DVector::<f64>::zeros(p);
    for &j in support {
        d[j] = rng.sample(StandardNormal);
    }
    if !comp.is_empty() {
        let budget = phi * support.iter().map(|&j| d[j].abs()).sum::<f64>();
        let m = rng.gen_range(1..=comp.len());
        let mut off = 0.0;
        let mut picked = Vec::with_capacity(m);
        for (i, &j) in comp.iter().enumerate() {
            // selection sampling: m of the complement, uniformly
            let left = comp.len() - i;
            if rng.gen_range(0..left) < m - picked.len() {
                let z: f64 = rng.sample(StandardNormal);
                d[j] = z;
                off += z.abs();
                picked.push(j);
            }
        }
        let frac: f64 = if rng.gen_bool(0.5) { 1.0 } else { rng.gen() };
        if off > 0.0 {
            let s = frac * budget / off;
            for &j in &picked {
                d[j] *= s;
            }
        }
    }
    let norm = d.norm();
    if norm > 0.0 {
        d / norm
    } else {
        d
    }
}

/// Pulls a direction back into the cone by shrinking its off-support part,
/// then normalizes.
pub(crate) fn project_into_cone(mut d: DVector<f64>, support: &[usize], comp: &[usize], phi: f64) -> Option<DVector<f64>> {
    let on: f64 = support.iter().map(|&j| d[j].abs()).sum();
    let off: f64 = comp.iter().map(|&j| d[j].abs()).sum();
    if off > phi * on {
        let s = if off > 0.0 { phi * on / off } else { 0.0 };
        for &j in comp {
            d[j] *= s;
        }
    }
    let norm = d.norm();
    if norm > 0.0 && norm.is_finite() {
        Some(d / norm)
    } else {
        None
    }
}

/// Minimizes `f` over unit cone directions by sampling `n_dirs` candidates,
/// then refines the best few with a shrinking random-perturbation search.
pub(crate) fn cone_search<F>(p: usize, support: &[usize], phi: f64, n_dirs: usize, seed: u64, f: F) -> (f64, DVector<f64>)
where
    F: Fn(&DVector<f64>) -> f64,
{
    const STARTS: usize = 8;
    let comp = complement(p, support);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples: Vec<(f64, DVector<f64>)> = (0..n_dirs)
        .map(|_| {
            let d = sample_cone_direction(&mut rng, p, support, &comp, phi);
            (f(&d), d)
        })
        .collect();
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    samples.truncate(STARTS);
    let budget = 20 * n_dirs.max(50);
    let mut best = (f64::INFINITY, DVector::zeros(p));
    for (mut val, mut d) in samples {
        let mut step = 0.5;
        for _ in 0..budget {
            if step < 1e-9 {
                break;
            }
            let mut cand = d.clone();
            for j in 0..p {
                let z: f64 = rng.sample(StandardNormal);
                cand[j] += step * z / (p as f64).sqrt();
            }
            match project_into_cone(cand, support, &comp, phi).map(|c| (f(&c), c)) {
                Some((v, c)) if v < val => {
                    val = v;
                    d = c;
                    step *= 1.5;
                }
                _ => step *= 0.97,
            }
        }
        if val < best.0 {
            best = (val, d);
        }
    }
    best
}

/// Monte Carlo probe of the restricted eigenvalue: the smallest sampled
/// value of `|vΔ|²/n` over unit `Δ` in the cone. An upper bound on the true
/// restricted minimum. Infinite for an empty support, whose cone is `{0}`.
pub fn restricted_eig_probe(v: &DMatrix<f64>, support: &[usize], n_dirs: usize, seed: u64) -> Result<f64> {
    let (n, p) = v.shape();
    check_support(p, support)?;
    if n_dirs == 0 {
        return Err(Error::InvalidArgument("n_dirs must be at least 1".into()));
    }
    if support.is_empty() {
        return Ok(f64::INFINITY);
    }
    let gram = v.tr_mul(v) / n as f64;
    let (val, _) = cone_search(p, support, RE_CONE, n_dirs, seed, |d| d.dot(&(&gram * d)));
    Ok(val)
}
