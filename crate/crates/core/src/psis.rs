//! Pareto-smoothed importance sampling.
//!
//! The largest `M = ⌊min(0.2 S, 3 √S)⌋` ratios are replaced by quantiles of a
//! generalized Pareto distribution fitted to their excesses over the
//! `(M+1)`-th largest ratio. The fitted shape `k̂` is the reliability
//! diagnostic.

use crate::error::{Error, Result};
use crate::sampling::{log_sum_exp, normalize_log_weights, LogWeights};

/// Log ratios within this distance of their maximum count as equal, so
/// rounding noise in ratios that are constant in exact arithmetic is not
/// mistaken for a tail.
pub const EQUAL_RATIO_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct PsisResult {
    pub smoothed: LogWeights,
    pub k_hat: f64,
    pub tail_len: usize,
    pub reliable: bool,
}

/// Tail length used for a sample of size `s`.
pub fn tail_length(s: usize) -> usize {
    let s = s as f64;
    (0.2 * s).min(3.0 * s.sqrt()).floor() as usize
}

/// `min(1 - 1/log10(S), 0.7)`, floored at 0.5 when `S < 32`.
pub fn k_threshold(s: usize) -> f64 {
    let s = s.max(2) as f64;
    let k = (1.0 - 1.0 / s.log10()).min(0.7);
    if s < 32.0 {
        k.max(0.5)
    } else {
        k
    }
}

/// Generalized Pareto quantile function with location zero.
pub fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (-p).ln_1p()
    } else {
        sigma * (-k * (-p).ln_1p()).exp_m1() / k
    }
}

/// Profile-likelihood GPD fit (Zhang & Stephens grid with the weakly
/// informative shrinkage of `k̂` toward 0.5 used by the reference PSIS
/// implementation).
///
/// `tail_excesses` must be nonnegative and sorted ascending.
pub fn gpd_fit_tail(tail_excesses: &[f64]) -> Result<(f64, f64)> {
    let n = tail_excesses.len();
    if n < 5 {
        return Err(Error::InsufficientTail(n));
    }
    let x = tail_excesses;
    let x_max = x[n - 1];
    if x[0] == x_max {
        return Err(Error::DegenerateTail);
    }
    const PRIOR: f64 = 3.0;
    const MIN_GRID: usize = 30;
    let grid = MIN_GRID + (n as f64).sqrt().floor() as usize;
    let quartile_idx = ((n as f64) / 4.0 + 0.5).floor() as usize;
    let x_star = x[quartile_idx.max(1) - 1];
    if x_star <= 0.0 {
        // A first quartile of zero leaves the grid undefined.
        return Err(Error::DegenerateTail);
    }

    let thetas: Vec<f64> = (1..=grid)
        .map(|j| 1.0 / x_max + (1.0 - (grid as f64 / (j as f64 - 0.5)).sqrt()) / PRIOR / x_star)
        .collect();
    let profile: Vec<f64> = thetas
        .iter()
        .map(|&theta| {
            let a = -theta;
            let k = x.iter().map(|&xi| (a * xi).ln_1p()).sum::<f64>() / n as f64;
            n as f64 * ((a / k).ln() - k - 1.0)
        })
        .collect();
    let finite: Vec<f64> = profile
        .iter()
        .map(|&l| if l.is_nan() { f64::NEG_INFINITY } else { l })
        .collect();
    let lse = log_sum_exp(&finite)?;
    if !lse.is_finite() {
        return Err(Error::DegenerateTail);
    }
    let theta_hat: f64 = thetas
        .iter()
        .zip(&finite)
        .map(|(t, l)| t * (l - lse).exp())
        .sum();
    let k_raw = x.iter().map(|&xi| (-theta_hat * xi).ln_1p()).sum::<f64>() / n as f64;
    let sigma = -k_raw / theta_hat;
    let k = (k_raw * n as f64 + 0.5 * 10.0) / (n as f64 + 10.0);
    if !k.is_finite() || !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::DegenerateTail);
    }
    Ok((k, sigma))
}

/// Smooths `log_ratios` and reports `k̂`.
///
/// When every ratio is equal (within [`EQUAL_RATIO_TOL`]) the proposal
/// matches the target; the result is uniform weights with `k̂ = -inf` and
/// `reliable = true`. Any other degenerate tail leaves the weights
/// unsmoothed and `reliable = false`.
pub fn psis_smooth(log_ratios: &[f64]) -> Result<PsisResult> {
    let s = log_ratios.len();
    let m = tail_length(s);
    let threshold = k_threshold(s);
    if log_ratios.iter().any(|x| x.is_nan()) {
        return Err(Error::Usage("NaN log ratio".into()));
    }
    let finite = log_ratios.iter().filter(|x| x.is_finite()).count();
    if finite < m + 1 || m == 0 {
        return Err(Error::Usage(format!(
            "psis needs at least {} finite log ratios, got {finite}",
            m + 1
        )));
    }

    let max = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = log_ratios.iter().map(|x| x - max).collect();
    if shifted.iter().all(|x| *x >= -EQUAL_RATIO_TOL) {
        let smoothed = normalize_log_weights(&shifted)?;
        return Ok(PsisResult {
            smoothed,
            k_hat: f64::NEG_INFINITY,
            tail_len: m,
            reliable: true,
        });
    }

    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| shifted[a].total_cmp(&shifted[b]).then(a.cmp(&b)));
    let tail_idx = &order[s - m..];
    let cutoff = shifted[order[s - m - 1]];
    let cutoff_exp = cutoff.exp();
    let excesses: Vec<f64> = tail_idx
        .iter()
        .map(|&i| (shifted[i].exp() - cutoff_exp).max(0.0))
        .collect();

    match gpd_fit_tail(&excesses) {
        Ok((k_hat, sigma)) => {
            let mut smoothed_lr = shifted.clone();
            if k_hat.is_finite() {
                for (z, &i) in tail_idx.iter().enumerate() {
                    let p = (z as f64 + 0.5) / m as f64;
                    let q = gpd_quantile(p, k_hat, sigma) + cutoff_exp;
                    // Cap at the pre-smoothing maximum (0 after the shift).
                    smoothed_lr[i] = q.ln().min(0.0);
                }
            }
            let smoothed = normalize_log_weights(&smoothed_lr)?;
            Ok(PsisResult {
                smoothed,
                k_hat,
                tail_len: m,
                reliable: k_hat < threshold,
            })
        }
        Err(Error::DegenerateTail) | Err(Error::InsufficientTail(_)) => Ok(PsisResult {
            smoothed: normalize_log_weights(&shifted)?,
            k_hat: f64::INFINITY,
            tail_len: m,
            reliable: false,
        }),
        Err(e) => Err(e),
    }
}
