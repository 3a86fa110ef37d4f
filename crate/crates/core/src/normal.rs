//! Standard normal helpers with tail-stable logarithms.
//!
//! `Φ(u)` is evaluated through `erfc`, which keeps full relative precision
//! in the lower tail until it underflows near `u ≈ -37`. Beyond a cutoff the
//! Mills ratio is evaluated by its continued fraction instead.

use statrs::function::erf::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

const TAIL_CUTOFF: f64 = -30.0;

/// Standard normal density.
pub fn pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * PI).sqrt()
}

/// Standard normal distribution function.
pub fn cdf(u: f64) -> f64 {
    0.5 * erfc(-u * FRAC_1_SQRT_2)
}

/// Upper-tail Mills ratio `(1 - Φ(t)) / φ(t)` for large positive `t`,
/// by the Laplace continued fraction evaluated bottom-up.
fn upper_mills_cf(t: f64) -> f64 {
    let mut acc = t;
    for k in (1..=60).rev() {
        acc = t + k as f64 / acc;
    }
    1.0 / acc
}

/// `log Φ(u)`, accurate in both tails.
pub fn log_cdf(u: f64) -> f64 {
    if u < TAIL_CUTOFF {
        // Φ(u) = φ(u) · R(-u)
        -0.5 * u * u - 0.5 * (2.0 * PI).ln() + upper_mills_cf(-u).ln()
    } else if u > 5.0 {
        // Φ(u) = 1 - Φ(-u), Φ(-u) tiny
        (-cdf(-u)).ln_1p()
    } else {
        cdf(u).ln()
    }
}

/// Inverse Mills ratio `φ(u) / Φ(u)`; the derivative of `log Φ(u)`.
pub fn inverse_mills(u: f64) -> f64 {
    if u < TAIL_CUTOFF {
        1.0 / upper_mills_cf(-u)
    } else {
        pdf(u) / cdf(u)
    }
}
