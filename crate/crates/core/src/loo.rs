//! Pareto-smoothed importance-sampling estimates of the leave-one-out
//! expected log predictive density, plus a brute-force refit oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ResponseKind};
use crate::error::{BartError, Result};
use crate::math::{log_sum_exp, normal_logpdf};
use crate::rng::derive_seed;
use crate::sampler::{fit_auto, predict, Chain, SamplerConfig};

/// Elpd estimate with pointwise contributions and tail-shape diagnostics.
/// A NaN diagnostic marks a point whose ratios were degenerate (or an oracle
/// result, where no tail was fitted).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LooResult {
    pub elpd: f64,
    pub pointwise: Vec<f64>,
    pub pareto_k: Vec<f64>,
}

/// Normalized smoothed importance weights for one observation.
#[derive(Debug, Clone)]
pub struct PsisSmoothed {
    pub weights: Vec<f64>,
    pub k_hat: f64,
}

/// Smooth a vector of log importance ratios.
///
/// The top min(ceil(0.2K), floor(3 sqrt(K))) ratios are replaced by expected
/// order statistics of a generalized Pareto distribution fitted to the tail,
/// capped at the raw maximum. Returns weights normalized to sum to one and
/// the tail-shape estimate (NaN when the tail is degenerate and smoothing is
/// the identity).
pub fn psis_smooth(log_ratios: &[f64]) -> Result<PsisSmoothed> {
    if log_ratios.len() < 5 {
        return Err(BartError::InvalidData(
            "need at least 5 ratios to smooth".into(),
        ));
    }
    let (lw, k_hat) = psis_log_weights(log_ratios);
    let lse = log_sum_exp(&lw);
    Ok(PsisSmoothed {
        weights: lw.iter().map(|&w| (w - lse).exp()).collect(),
        k_hat,
    })
}

/// Tail size for K draws: min(ceil(0.2 K), floor(3 sqrt(K))).
pub fn tail_length(k: usize) -> usize {
    let frac = (0.2 * k as f64).ceil() as usize;
    let root = (3.0 * (k as f64).sqrt()).floor() as usize;
    frac.min(root).min(k.saturating_sub(1))
}

/// Smoothed (unnormalized) log weights plus the tail-shape estimate.
fn psis_log_weights(log_ratios: &[f64]) -> (Vec<f64>, f64) {
    let k = log_ratios.len();
    let m = tail_length(k);
    if m < 5 {
        return (log_ratios.to_vec(), f64::NAN);
    }
    let max_lr = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max_lr.is_finite() {
        return (log_ratios.to_vec(), f64::NAN);
    }
    let ratios: Vec<f64> = log_ratios.iter().map(|&l| (l - max_lr).exp()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| ratios[a].total_cmp(&ratios[b]));
    let cutoff = ratios[order[k - m - 1]];
    let exceed: Vec<f64> = order[k - m..]
        .iter()
        .map(|&i| ratios[i] - cutoff)
        .collect();
    if exceed[m - 1] <= f64::EPSILON * 8.0 {
        // Flat tail: nothing to fit, smoothing is the identity.
        return (log_ratios.to_vec(), f64::NAN);
    }
    let Some((k_hat, sigma)) = gpd_fit(&exceed) else {
        return (log_ratios.to_vec(), f64::NAN);
    };
    let mut lw = log_ratios.to_vec();
    for (z, &i) in order[k - m..].iter().enumerate() {
        let q = gpd_quantile((z as f64 + 0.5) / m as f64, k_hat, sigma);
        let val = (cutoff + q).min(1.0); // cap at the raw maximum
        lw[i] = val.ln() + max_lr;
    }
    (lw, k_hat)
}

/// Profile-likelihood generalized-Pareto fit (quantile-grid estimator) on
/// sorted exceedances; returns (shape, scale). The shape carries a weak
/// prior pulling it toward 0.5.
fn gpd_fit(exceed_sorted: &[f64]) -> Option<(f64, f64)> {
    let n = exceed_sorted.len();
    let x = exceed_sorted;
    let x_max = x[n - 1];
    if !(x_max > 0.0) {
        return None;
    }
    let quart = ((n as f64 / 4.0 + 0.5).floor() as usize).max(1) - 1;
    let mut xstar = x[quart];
    if xstar <= 0.0 {
        xstar = x_max * 0.25;
    }
    let grid = 30 + (n as f64).sqrt().floor() as usize;
    let mut thetas = Vec::with_capacity(grid);
    let mut logliks = Vec::with_capacity(grid);
    for j in 1..=grid {
        let theta = 1.0 / x_max + (1.0 - (grid as f64 / (j as f64 - 0.5)).sqrt()) / (3.0 * xstar);
        if theta == 0.0 {
            continue;
        }
        let k: f64 = x.iter().map(|&v| (1.0 - theta * v).ln()).sum::<f64>() / n as f64;
        if k == 0.0 || -theta / k <= 0.0 {
            continue;
        }
        thetas.push(theta);
        logliks.push(n as f64 * ((-theta / k).ln() - k - 1.0));
    }
    if thetas.is_empty() {
        return None;
    }
    let lse = log_sum_exp(&logliks);
    let theta_hat: f64 = thetas
        .iter()
        .zip(&logliks)
        .map(|(&t, &l)| t * (l - lse).exp())
        .sum();
    if theta_hat == 0.0 {
        return None;
    }
    let k_raw: f64 = x.iter().map(|&v| (1.0 - theta_hat * v).ln()).sum::<f64>() / n as f64;
    let sigma = -k_raw / theta_hat;
    if !(sigma > 0.0) {
        return None;
    }
    let k_hat = (k_raw * n as f64 + 5.0) / (n as f64 + 10.0);
    Some((k_hat, sigma))
}

/// Quantile of the generalized Pareto distribution with location 0.
fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (1.0 - p).ln()
    } else {
        sigma / k * ((1.0 - p).powf(-k) - 1.0)
    }
}

fn check_chain_matches(chain: &Chain, data: &Dataset, want: ResponseKind) -> Result<()> {
    if chain.response != want {
        return Err(BartError::InvalidData(format!(
            "chain response kind {:?} does not fit this estimator",
            chain.response
        )));
    }
    if chain.data_fingerprint != data.fingerprint() {
        return Err(BartError::InvalidData(
            "chain was not fitted on this dataset".into(),
        ));
    }
    Ok(())
}

fn elpd_from_logliks(loglik: &[Vec<f64>]) -> LooResult {
    // loglik[i][k]: log f(y_i | theta_k).
    let mut pointwise = Vec::with_capacity(loglik.len());
    let mut pareto_k = Vec::with_capacity(loglik.len());
    for li in loglik {
        let k = li.len();
        if k < 5 {
            // Too few draws to smooth: raw self-normalized weights.
            let lr: Vec<f64> = li.iter().map(|&l| -l).collect();
            let num = log_sum_exp(&lr.iter().zip(li).map(|(&r, &l)| r + l).collect::<Vec<_>>());
            let den = log_sum_exp(&lr);
            pointwise.push(num - den);
            pareto_k.push(f64::NAN);
            continue;
        }
        let lr: Vec<f64> = li.iter().map(|&l| -l).collect();
        let (lw, k_hat) = psis_log_weights(&lr);
        let num = log_sum_exp(&lw.iter().zip(li).map(|(&w, &l)| w + l).collect::<Vec<_>>());
        let den = log_sum_exp(&lw);
        pointwise.push(num - den);
        pareto_k.push(k_hat);
    }
    LooResult {
        elpd: pointwise.iter().sum(),
        pointwise,
        pareto_k,
    }
}

/// PSIS estimate of elpd_loo for a continuous-response chain on its training
/// data.
pub fn elpd_loo_gaussian(chain: &Chain, data: &Dataset) -> Result<LooResult> {
    check_chain_matches(chain, data, ResponseKind::Continuous)?;
    if chain.draws.is_empty() {
        return Err(BartError::EmptyChain);
    }
    let preds = predict(chain, &data.rows())?;
    let loglik: Vec<Vec<f64>> = (0..data.n())
        .map(|i| {
            chain
                .draws
                .iter()
                .zip(&preds.per_draw)
                .map(|(d, row)| normal_logpdf(data.y[i], row[i], d.sigma))
                .collect()
        })
        .collect();
    Ok(elpd_from_logliks(&loglik))
}

/// PSIS estimate of elpd_loo for a probit chain on its training data.
pub fn elpd_loo_bernoulli(chain: &Chain, data: &Dataset) -> Result<LooResult> {
    check_chain_matches(chain, data, ResponseKind::Binary)?;
    if chain.draws.is_empty() {
        return Err(BartError::EmptyChain);
    }
    let preds = predict(chain, &data.rows())?;
    let probs = preds.prob_per_draw.expect("probit chain has probabilities");
    let loglik: Vec<Vec<f64>> = (0..data.n())
        .map(|i| {
            probs
                .iter()
                .map(|row| {
                    let p = row[i].clamp(1e-300, 1.0 - 1e-16);
                    if data.y[i] == 1.0 {
                        p.ln()
                    } else {
                        (1.0 - p).ln()
                    }
                })
                .collect()
        })
        .collect();
    Ok(elpd_from_logliks(&loglik))
}

/// Exact leave-one-out oracle: refits the model n times, estimating each
/// predictive density by the Monte Carlo average over that refit's draws.
/// Guarded to small n; intended for validating the PSIS estimator.
pub fn exact_loo_oracle(data: &Dataset, cfg: &SamplerConfig) -> Result<LooResult> {
    let n = data.n();
    if n > 50 {
        return Err(BartError::InvalidConfig(format!(
            "exact oracle refits n times; n={n} exceeds the budget of 50"
        )));
    }
    if n < 2 {
        return Err(BartError::InvalidData(
            "leave-one-out needs at least 2 observations".into(),
        ));
    }
    let kind = data.response_kind();
    let pointwise: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let train = data.select_rows(&keep);
            let mut cfg_i = cfg.clone();
            cfg_i.seed = derive_seed(cfg.seed, 1000 + i as u64);
            let chain = fit_auto(&train, &cfg_i)?;
            let preds = predict(&chain, &[data.row(i)])?;
            let logliks: Vec<f64> = match kind {
                ResponseKind::Continuous => chain
                    .draws
                    .iter()
                    .zip(&preds.per_draw)
                    .map(|(d, row)| normal_logpdf(data.y[i], row[0], d.sigma))
                    .collect(),
                ResponseKind::Binary => preds
                    .prob_per_draw
                    .expect("probit predictions")
                    .iter()
                    .map(|row| {
                        let p = row[0].clamp(1e-300, 1.0 - 1e-16);
                        if data.y[i] == 1.0 {
                            p.ln()
                        } else {
                            (1.0 - p).ln()
                        }
                    })
                    .collect(),
            };
            Ok(log_sum_exp(&logliks) - (logliks.len() as f64).ln())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(LooResult {
        elpd: pointwise.iter().sum(),
        pareto_k: vec![f64::NAN; pointwise.len()],
        pointwise,
    })
}
