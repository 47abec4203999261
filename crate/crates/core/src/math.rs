//! Shared numerical routines: normal CDF/quantile, truncated-normal draws,
//! log-sum-exp, and small sample statistics.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{BartError, Result};

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / SQRT_2)
}

/// Standard normal quantile.
pub fn phi_inv(p: f64) -> f64 {
    -SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p)
}

/// Log density of N(mu, sigma^2) at x.
pub fn normal_logpdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * LN_2PI
}

/// Quantile of the chi-squared distribution with `df` degrees of freedom.
pub fn chi_squared_quantile(p: f64, df: f64) -> Result<f64> {
    let d = ChiSquared::new(df)
        .map_err(|e| BartError::InvalidConfig(format!("chi-squared df {df}: {e}")))?;
    Ok(d.inverse_cdf(p))
}

/// log(sum(exp(x))) guarded against overflow; -inf for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with divisor n-1.
pub fn sample_var(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn sample_sd(xs: &[f64]) -> f64 {
    sample_var(xs).sqrt()
}

/// Median of a slice (not required to be sorted).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Draw Z ~ N(mu, 1) conditioned on Z > lo (if `above`) or Z < lo (otherwise).
///
/// Rejection from the untruncated normal near the bulk; Robert's shifted
/// exponential envelope once the truncation point sits in the tail.
pub fn truncated_std_normal<R: Rng + ?Sized>(rng: &mut R, mu: f64, bound: f64, above: bool) -> f64 {
    // Standardize to lower truncation of a standard normal.
    let alpha = if above { bound - mu } else { mu - bound };
    let z = if alpha < 0.45 {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z > alpha {
                break z;
            }
        }
    } else {
        let lambda = 0.5 * (alpha + (alpha * alpha + 4.0).sqrt());
        loop {
            let e: f64 = Exp1.sample(rng);
            let z = alpha + e / lambda;
            let d = z - lambda;
            let u: f64 = rng.random();
            if u <= (-0.5 * d * d).exp() {
                break z;
            }
        }
    };
    if above {
        mu + z
    } else {
        mu - z
    }
}
