//! Hamiltonian Monte Carlo with a jittered number of leapfrog steps,
//! dual-averaging step size and windowed diagonal metric adaptation.
//!
//! Counters: one `n_grad` per leapfrog step and one `n_logp` per
//! accept/reject decision. The step-count jitter is drawn from a stream that
//! depends only on `(seed, chain)`, and trajectories are never cut short, so
//! every run with the same configuration performs the same number of
//! gradient evaluations regardless of the target.

use std::iter::Sum;
use std::ops::{Add, AddAssign};

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::models::Model;
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::sampling::DrawMatrix;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounters {
    pub n_logp: u64,
    pub n_grad: u64,
    pub n_pointwise_loglik: u64,
}

impl Add for EvalCounters {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            n_logp: self.n_logp + o.n_logp,
            n_grad: self.n_grad + o.n_grad,
            n_pointwise_loglik: self.n_pointwise_loglik + o.n_pointwise_loglik,
        }
    }
}

impl AddAssign for EvalCounters {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for EvalCounters {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_sampling: usize,
    pub target_accept: f64,
    pub seed: u64,
    /// Steps per trajectory are uniform on `1..=max_leapfrog`.
    pub max_leapfrog: usize,
    /// Initial points are `init_point() + U(-init_radius, init_radius)`.
    pub init_radius: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self::inference()
    }
}

impl HmcConfig {
    /// Four chains of 1000 warmup and 1000 sampling iterations.
    pub fn inference() -> Self {
        Self {
            n_chains: 4,
            n_warmup: 1000,
            n_sampling: 1000,
            target_accept: 0.8,
            seed: 1,
            max_leapfrog: 10,
            init_radius: 0.5,
        }
    }

    /// Two chains of 1000 warmup and 50 sampling iterations.
    pub fn surrogate_training() -> Self {
        Self {
            n_chains: 2,
            n_warmup: 1000,
            n_sampling: 50,
            ..Self::inference()
        }
    }

    pub fn n_draws(&self) -> usize {
        self.n_chains * self.n_sampling
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 || self.n_sampling == 0 {
            return usage("n_chains and n_sampling must be at least 1");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return usage("target_accept must lie in (0, 1)");
        }
        if self.max_leapfrog == 0 {
            return usage("max_leapfrog must be at least 1");
        }
        if !(self.init_radius >= 0.0) {
            return usage("init_radius must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HmcDiagnostics {
    pub divergences: usize,
    pub split_rhat: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub accept_rate: f64,
}

#[derive(Debug, Clone)]
pub struct HmcOutput {
    /// Constrained draws, chain-major.
    pub draws: DrawMatrix,
    /// The same draws on the unconstrained scale.
    pub unconstrained: DrawMatrix,
    pub counters: EvalCounters,
    pub diagnostics: HmcDiagnostics,
}

/// Leapfrog integration of `n_steps` steps with diagonal inverse metric.
/// `grad` holds the gradient at `q` on entry and at the final point on exit.
/// Returns the log density at the final point.
#[allow(clippy::too_many_arguments)]
pub fn leapfrog(
    model: &dyn Model,
    q: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    eps: f64,
    inv_metric: &[f64],
    n_steps: usize,
    n_grad: &mut u64,
) -> f64 {
    let mut lp = f64::NAN;
    for _ in 0..n_steps {
        for j in 0..q.len() {
            p[j] += 0.5 * eps * grad[j];
            q[j] += eps * inv_metric[j] * p[j];
        }
        lp = model.logp_grad(q, grad);
        *n_grad += 1;
        for j in 0..q.len() {
            p[j] += 0.5 * eps * grad[j];
        }
    }
    lp
}

pub fn kinetic(p: &[f64], inv_metric: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_metric).map(|(a, m)| a * a * m).sum::<f64>()
}

const DIVERGENCE_THRESHOLD: f64 = 1000.0;

struct DualAveraging {
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    t: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, delta: f64) -> Self {
        Self {
            mu: (10.0 * eps).ln(),
            s_bar: 0.0,
            x_bar: 0.0,
            t: 0.0,
            delta,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.t += 1.0;
        let eta = 1.0 / (self.t + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept);
        let x = self.mu - self.s_bar * self.t.sqrt() / Self::GAMMA;
        let w = self.t.powf(-Self::KAPPA);
        self.x_bar = w * x + (1.0 - w) * self.x_bar;
        x.exp()
    }

    fn final_eps(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// End points (exclusive) of the slow metric-adaptation windows.
fn adaptation_windows(n_warmup: usize) -> (usize, Vec<usize>) {
    if n_warmup < 20 {
        return (n_warmup, vec![]);
    }
    let (init, term, base) = if n_warmup < 150 {
        let init = (0.15 * n_warmup as f64) as usize;
        let term = (0.1 * n_warmup as f64) as usize;
        (init, term, n_warmup - init - term)
    } else {
        (75, 50, 25)
    };
    let slow_end = n_warmup - term;
    let mut ends = Vec::new();
    let mut start = init;
    let mut size = base;
    while start < slow_end {
        let mut end = start + size;
        if end + 2 * size > slow_end {
            end = slow_end;
        }
        ends.push(end);
        start = end;
        size *= 2;
    }
    (init, ends)
}

struct ChainResult {
    draws: Vec<Vec<f64>>,
    counters: EvalCounters,
    divergences: usize,
    step_size: f64,
    accept_sum: f64,
}

fn init_chain(model: &dyn Model, cfg: &HmcConfig, rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let base = model.init_point();
    let d = model.dim();
    let mut grad = vec![0.0; d];
    for _ in 0..100 {
        let q: Vec<f64> = base
            .iter()
            .map(|b| b + cfg.init_radius * (2.0 * rng.gen::<f64>() - 1.0))
            .collect();
        let lp = model.logp_grad(&q, &mut grad);
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            return Ok((q, grad, lp));
        }
    }
    Err(Error::Initialization(
        "no finite log density and gradient found near the initial point".into(),
    ))
}

fn run_chain(model: &dyn Model, cfg: &HmcConfig, stream: u64, chain: usize) -> Result<ChainResult> {
    let d = model.dim();
    let mut rng = rng_from_seed(derive_seed(derive_seed(cfg.seed, "hmc-target", stream), "chain", chain as u64));
    let mut steps_rng = rng_from_seed(derive_seed(cfg.seed, "hmc-steps", chain as u64));
    let (mut q, mut grad, mut lp) = init_chain(model, cfg, &mut rng)?;

    let mut inv_metric = vec![1.0f64; d];
    let mut eps = 0.1;
    let mut da = DualAveraging::new(eps, cfg.target_accept);
    let (init_buffer, window_ends) = adaptation_windows(cfg.n_warmup);
    let mut window_start = init_buffer;
    let mut welford_n = 0.0;
    let mut welford_mean = vec![0.0; d];
    let mut welford_m2 = vec![0.0; d];

    let mut counters = EvalCounters::default();
    let mut divergences = 0;
    let mut warmup_divergences = 0;
    let mut accept_sum = 0.0;
    let mut draws = Vec::with_capacity(cfg.n_sampling);
    let mut p = vec![0.0; d];
    let mut q_new = vec![0.0; d];
    let mut grad_new = vec![0.0; d];

    for it in 0..cfg.n_warmup + cfg.n_sampling {
        let warmup = it < cfg.n_warmup;
        let n_steps = steps_rng.gen_range(1..=cfg.max_leapfrog);
        for j in 0..d {
            p[j] = rng.sample::<f64, _>(StandardNormal) / inv_metric[j].sqrt();
        }
        let h0 = -lp + kinetic(&p, &inv_metric);
        q_new.copy_from_slice(&q);
        grad_new.copy_from_slice(&grad);
        let lp_new = leapfrog(model, &mut q_new, &mut p, &mut grad_new, eps, &inv_metric, n_steps, &mut counters.n_grad);
        counters.n_logp += 1;
        let h1 = -lp_new + kinetic(&p, &inv_metric);
        let delta = h1 - h0;
        let finite = delta.is_finite() && grad_new.iter().all(|g| g.is_finite());
        let divergent = !finite || delta > DIVERGENCE_THRESHOLD;
        let accept = if finite { (-delta).exp().min(1.0) } else { 0.0 };
        if divergent {
            if warmup {
                warmup_divergences += 1;
            } else {
                divergences += 1;
            }
        }
        if finite && rng.gen::<f64>() < accept {
            q.copy_from_slice(&q_new);
            grad.copy_from_slice(&grad_new);
            lp = lp_new;
        }

        if warmup {
            eps = da.update(accept);
            if it >= init_buffer && !window_ends.is_empty() && it < *window_ends.last().expect("nonempty") {
                welford_n += 1.0;
                for j in 0..d {
                    let delta = q[j] - welford_mean[j];
                    welford_mean[j] += delta / welford_n;
                    welford_m2[j] += delta * (q[j] - welford_mean[j]);
                }
            }
            if window_ends.contains(&(it + 1)) && it + 1 > window_start {
                let n = welford_n;
                if n >= 3.0 {
                    for j in 0..d {
                        let var = welford_m2[j] / (n - 1.0);
                        inv_metric[j] = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0));
                    }
                }
                welford_n = 0.0;
                welford_mean.iter_mut().for_each(|v| *v = 0.0);
                welford_m2.iter_mut().for_each(|v| *v = 0.0);
                window_start = it + 1;
                da = DualAveraging::new(eps, cfg.target_accept);
            }
            if it + 1 == cfg.n_warmup {
                eps = da.final_eps();
            }
        } else {
            accept_sum += accept;
            draws.push(q.clone());
        }
    }
    if cfg.n_warmup > 0 && warmup_divergences == cfg.n_warmup {
        return Err(Error::Sampler(format!("chain {chain}: every warmup iteration diverged")));
    }
    Ok(ChainResult {
        draws,
        counters,
        divergences,
        step_size: eps,
        accept_sum,
    })
}

/// Split-R̂ of one scalar across chains (each chain split in half).
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let half = chains.first().map_or(0, |c| c.len() / 2);
    if half < 2 {
        return f64::NAN;
    }
    let parts: Vec<&[f64]> = chains.iter().flat_map(|c| [&c[..half], &c[c.len() - half..]]).collect();
    let n = half as f64;
    let m = parts.len() as f64;
    let means: Vec<f64> = parts.iter().map(|p| p.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = parts
        .iter()
        .zip(&means)
        .map(|(p, mu)| p.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

/// Samples `model` with `cfg.n_chains` chains run concurrently. `stream`
/// separates the momentum streams of different targets sharing one
/// configuration.
pub fn hmc_sample(model: &dyn Model, cfg: &HmcConfig, stream: u64) -> Result<HmcOutput> {
    cfg.validate()?;
    let chains: Vec<ChainResult> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| run_chain(model, cfg, stream, c))
        .collect::<Result<_>>()?;
    let d = model.dim();
    let split_rhat_vals = (0..d)
        .map(|j| {
            let per_chain: Vec<Vec<f64>> = chains.iter().map(|c| c.draws.iter().map(|q| q[j]).collect()).collect();
            split_rhat(&per_chain)
        })
        .collect();
    let rows: Vec<Vec<f64>> = chains.iter().flat_map(|c| c.draws.iter().cloned()).collect();
    let unconstrained = DrawMatrix::from_rows(&rows)?;
    let constrained: Vec<Vec<f64>> = rows.iter().map(|u| model.constrain(u)).collect();
    let draws = DrawMatrix::from_rows(&constrained)?;
    let n_draws = rows.len() as f64;
    Ok(HmcOutput {
        draws,
        unconstrained,
        counters: chains.iter().map(|c| c.counters).sum(),
        diagnostics: HmcDiagnostics {
            divergences: chains.iter().map(|c| c.divergences).sum(),
            split_rhat: split_rhat_vals,
            step_sizes: chains.iter().map(|c| c.step_size).collect(),
            accept_rate: chains.iter().map(|c| c.accept_sum).sum::<f64>() / n_draws,
        },
    })
}
