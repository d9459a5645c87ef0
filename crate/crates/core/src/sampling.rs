//! Weighted-sample primitives shared by the importance-sampling modules.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::rng::rng_from_seed;

/// Normalized weights below this are flushed to zero.
pub const WEIGHT_FLOOR: f64 = 1e-300;

/// An `S × d` matrix of draws, stored row-major (one row per draw).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawMatrix {
    data: Vec<f64>,
    n_draws: usize,
    dim: usize,
}

impl DrawMatrix {
    pub fn new(data: Vec<f64>, n_draws: usize, dim: usize) -> Result<Self> {
        if n_draws == 0 || dim == 0 {
            return usage("draw matrix needs at least one draw and one dimension");
        }
        if data.len() != n_draws * dim {
            return usage(format!(
                "draw matrix data has {} entries, expected {}x{}",
                data.len(),
                n_draws,
                dim
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return usage(format!("non-finite entry in draw {}", pos / dim));
        }
        Ok(Self { data, n_draws, dim })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return usage("ragged rows");
        }
        Self::new(rows.concat(), rows.len(), dim)
    }

    pub fn n_draws(&self) -> usize {
        self.n_draws
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.dim..(s + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Applies `f` to every row, producing a matrix with `new_dim` columns.
    pub fn map_rows(&self, new_dim: usize, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(self.n_draws * new_dim);
        for r in self.rows() {
            let out = f(r);
            if out.len() != new_dim {
                return usage("row map produced wrong dimension");
            }
            data.extend(out);
        }
        Self::new(data, self.n_draws, new_dim)
    }

    /// Stacks matrices vertically. All inputs must share `dim`.
    pub fn vstack(parts: &[&DrawMatrix]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return usage("nothing to stack");
        };
        let dim = first.dim;
        if parts.iter().any(|p| p.dim != dim) {
            return usage("dimension mismatch while stacking draws");
        }
        let data: Vec<f64> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        let n = data.len() / dim;
        Self::new(data, n, dim)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::new(data, idx.len(), self.dim)
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            for (acc, v) in m.iter_mut().zip(r) {
                *acc += v;
            }
        }
        let n = self.n_draws as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_draws, self.dim, &self.data)
    }
}

/// Log importance ratios together with their normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LogWeights {
    pub log_ratios: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LogWeights {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            log_ratios: vec![0.0; n],
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// Kish effective sample size.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// `log Σ exp(xs)` with max-shift.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return usage("log_sum_exp of an empty sequence");
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if max == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

pub fn normalize_log_weights(log_ratios: &[f64]) -> Result<LogWeights> {
    if log_ratios.iter().any(|x| x.is_nan()) {
        return usage("NaN log ratio");
    }
    let lse = log_sum_exp(log_ratios)?;
    if lse == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    if !lse.is_finite() {
        return usage("infinite log ratio");
    }
    let mut weights: Vec<f64> = log_ratios
        .iter()
        .map(|x| {
            let w = (x - lse).exp();
            if w < WEIGHT_FLOOR {
                0.0
            } else {
                w
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(LogWeights {
        log_ratios: log_ratios.to_vec(),
        weights,
    })
}

/// Self-normalized importance estimate `Σ h_s w_s`.
pub fn importance_expectation(h_values: &[f64], w: &LogWeights) -> Result<f64> {
    if h_values.len() != w.len() {
        return usage(format!(
            "{} function values for {} weights",
            h_values.len(),
            w.len()
        ));
    }
    Ok(h_values.iter().zip(&w.weights).map(|(h, w)| h * w).sum())
}

/// Multinomial resampling with replacement.
pub fn resample(draws: &DrawMatrix, w: &LogWeights, n_out: usize, seed: u64) -> Result<DrawMatrix> {
    let idx = resample_indices(&w.weights, n_out, seed)?;
    if idx.iter().any(|&i| i >= draws.n_draws()) {
        return usage("weights longer than draw matrix");
    }
    if w.len() != draws.n_draws() {
        return usage("weights and draws differ in length");
    }
    draws.select_rows(&idx)
}

/// Draws `n_out` indices i.i.d. from the categorical distribution `weights`.
pub fn resample_indices(weights: &[f64], n_out: usize, seed: u64) -> Result<Vec<usize>> {
    if n_out == 0 {
        return usage("n_out must be at least 1");
    }
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in weights {
        if !(w >= 0.0) || !w.is_finite() {
            return usage("invalid weight");
        }
        acc += w;
        cumulative.push(acc);
    }
    if acc <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    let last_positive = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
    let mut rng = rng_from_seed(seed);
    Ok((0..n_out)
        .map(|_| {
            let u = rng.gen::<f64>() * acc;
            cumulative.partition_point(|&c| c <= u).min(last_positive)
        })
        .collect())
}

pub fn weighted_mean(draws: &DrawMatrix, w: &LogWeights) -> Result<Vec<f64>> {
    if w.len() != draws.n_draws() {
        return usage("weights and draws differ in length");
    }
    let mut mean = vec![0.0; draws.dim()];
    for (r, &ws) in draws.rows().zip(&w.weights) {
        if ws == 0.0 {
            continue;
        }
        for (m, v) in mean.iter_mut().zip(r) {
            *m += ws * v;
        }
    }
    Ok(mean)
}

/// Weighted scatter about the weighted mean, symmetrized.
pub fn weighted_cov(draws: &DrawMatrix, w: &LogWeights) -> Result<DMatrix<f64>> {
    let mean = weighted_mean(draws, w)?;
    let d = draws.dim();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = DVector::<f64>::zeros(d);
    for (r, &ws) in draws.rows().zip(&w.weights) {
        if ws == 0.0 {
            continue;
        }
        for j in 0..d {
            centered[j] = r[j] - mean[j];
        }
        cov.ger(ws, &centered, &centered, 1.0);
    }
    let sym = (&cov + cov.transpose()) * 0.5;
    Ok(sym)
}
