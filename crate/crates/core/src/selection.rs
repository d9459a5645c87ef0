//! Choosing representative realizations whose posteriors serve as proposals.
//!
//! Every strategy returns a nonempty subset of the remaining index set, so
//! the orchestrator's index set shrinks each round.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::imputation::Dataset;
use crate::models::SurrogateSpec;
use crate::rng::{derive_seed, rng_from_seed};

/// `n` indices drawn uniformly without replacement from `remaining`.
pub fn select_random(remaining: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return usage("must select at least one index");
    }
    if n > remaining.len() {
        return usage(format!("cannot select {n} of {} indices", remaining.len()));
    }
    let mut rng = rng_from_seed(seed);
    Ok(sample_indices(&mut rng, remaining.len(), n)
        .into_iter()
        .map(|i| remaining[i])
        .collect())
}

/// The remaining index with the largest recorded `k̂`, lowest index on ties.
pub fn select_max_khat(remaining: &[usize], khat: &BTreeMap<usize, f64>) -> Result<usize> {
    Ok(top_khat(remaining, khat, 1)?[0])
}

fn top_khat(remaining: &[usize], khat: &BTreeMap<usize, f64>, n: usize) -> Result<Vec<usize>> {
    if remaining.is_empty() || n == 0 || n > remaining.len() {
        return usage("invalid selection size for max-k̂");
    }
    let mut scored = remaining
        .iter()
        .map(|&i| match khat.get(&i) {
            Some(k) if !k.is_nan() => Ok((i, *k)),
            _ => usage(format!("no k̂ recorded for index {i}")),
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(n).map(|(i, _)| i).collect())
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Number of minimum-spanning-tree edges joining the two samples.
///
/// Kruskal order is (weight, cross edges first, node pair). Preferring cross
/// edges among equal weights makes the count independent of sample labels,
/// so the statistic is symmetric and a sample against itself scores the
/// maximum `2N - 1`.
pub fn friedman_rafsky_cross_edges(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return usage("Friedman–Rafsky needs at least one row per sample");
    }
    let pts: Vec<&Vec<f64>> = a.iter().chain(b.iter()).collect();
    let dim = pts[0].len();
    if pts.iter().any(|p| p.len() != dim) {
        return usage("rows differ in length");
    }
    let n_a = a.len();
    let n = pts.len();
    let mut edges = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = pts[i].iter().zip(pts[j]).map(|(x, y)| (x - y) * (x - y)).sum();
            let cross = (i < n_a) != (j < n_a);
            edges.push((d2, !cross, i, j));
        }
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)).then(x.3.cmp(&y.3)));
    let mut uf = UnionFind((0..n).collect());
    let mut cross_count = 0;
    let mut taken = 0;
    for (_, not_cross, i, j) in edges {
        if uf.union(i, j) {
            taken += 1;
            if !not_cross {
                cross_count += 1;
            }
            if taken == n - 1 {
                break;
            }
        }
    }
    Ok(cross_count)
}

/// `1 - R / (2N - 1)` over the given rows of two datasets with equal shape.
/// `rows = None` uses every row.
pub fn friedman_rafsky_dissimilarity_rows(a: &Dataset, b: &Dataset, rows: Option<&[usize]>) -> Result<f64> {
    if a.names != b.names || a.n_rows() != b.n_rows() {
        return usage("datasets must share columns and row count");
    }
    if !a.is_complete() || !b.is_complete() {
        return usage("Friedman–Rafsky needs complete datasets");
    }
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..a.n_rows()).collect();
            &all
        }
    };
    if rows.is_empty() {
        return usage("Friedman–Rafsky needs N ≥ 1");
    }
    let ra: Vec<Vec<f64>> = rows.iter().map(|&r| a.row(r).to_vec()).collect();
    let rb: Vec<Vec<f64>> = rows.iter().map(|&r| b.row(r).to_vec()).collect();
    let r = friedman_rafsky_cross_edges(&ra, &rb)?;
    let total = ra.len() + rb.len() - 1;
    Ok(1.0 - r as f64 / total as f64)
}

pub fn friedman_rafsky_dissimilarity(a: &Dataset, b: &Dataset) -> Result<f64> {
    friedman_rafsky_dissimilarity_rows(a, b, None)
}

/// Pairwise dissimilarities over `rows` (all rows when `None`).
pub fn dissimilarity_matrix(datasets: &[Dataset], rows: Option<&[usize]>) -> Result<DMatrix<f64>> {
    let m = datasets.len();
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| friedman_rafsky_dissimilarity_rows(&datasets[i], &datasets[j], rows))
        .collect::<Result<_>>()?;
    let mut d = DMatrix::zeros(m, m);
    for ((i, j), v) in pairs.into_iter().zip(vals) {
        d[(i, j)] = v;
        d[(j, i)] = v;
    }
    Ok(d)
}

fn validate_dist(dist: &DMatrix<f64>) -> Result<()> {
    if !dist.is_square() {
        return usage("distance matrix must be square");
    }
    let m = dist.nrows();
    for i in 0..m {
        if dist[(i, i)] != 0.0 {
            return usage("distance matrix needs a zero diagonal");
        }
        for j in 0..m {
            let v = dist[(i, j)];
            if !(v >= 0.0) || (v - dist[(j, i)]).abs() > 1e-12 {
                return usage("distance matrix must be symmetric and nonnegative");
            }
        }
    }
    Ok(())
}

fn medoid_cost(dist: &DMatrix<f64>, medoids: &[usize]) -> f64 {
    (0..dist.nrows())
        .map(|i| medoids.iter().map(|&m| dist[(i, m)]).fold(f64::INFINITY, f64::min))
        .sum()
}

/// PAM build and swap. Returns the medoids (ascending) and the objective
/// after the build and after each accepted swap.
pub fn k_medoids_with_trace(dist: &DMatrix<f64>, k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    validate_dist(dist)?;
    let m = dist.nrows();
    if k == 0 || k > m {
        return usage(format!("k must lie in 1..={m}"));
    }
    // Build: greedily add the point that lowers the objective most.
    let mut medoids: Vec<usize> = Vec::with_capacity(k);
    while medoids.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for c in (0..m).filter(|c| !medoids.contains(c)) {
            let mut trial = medoids.clone();
            trial.push(c);
            let cost = medoid_cost(dist, &trial);
            if best.is_none_or(|(b, _)| cost < b) {
                best = Some((cost, c));
            }
        }
        medoids.push(best.expect("k ≤ m leaves a candidate").1);
    }
    let mut cost = medoid_cost(dist, &medoids);
    let mut trace = vec![cost];
    // Swap: take the best improving exchange until none improves.
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for pos in 0..k {
            for c in (0..m).filter(|c| !medoids.contains(c)) {
                let mut trial = medoids.clone();
                trial[pos] = c;
                let t = medoid_cost(dist, &trial);
                if t < cost - 1e-12 && best.is_none_or(|(b, _, _)| t < b) {
                    best = Some((t, pos, c));
                }
            }
        }
        match best {
            Some((t, pos, c)) => {
                medoids[pos] = c;
                cost = t;
                trace.push(cost);
            }
            None => break,
        }
    }
    medoids.sort_unstable();
    Ok((medoids, trace))
}

pub fn k_medoids(dist: &DMatrix<f64>, k: usize) -> Result<Vec<usize>> {
    Ok(k_medoids_with_trace(dist, k)?.0)
}

/// Indices at evenly spaced nearest-rank quantiles of `scores` (ascending,
/// ties by index), minimum and maximum included; `n = 1` selects the median.
/// Non-finite scores rank below all finite ones.
pub fn quantile_select(indices: &[usize], scores: &[f64], n: usize) -> Result<Vec<usize>> {
    if indices.len() != scores.len() {
        return usage("one score per index required");
    }
    let len = indices.len();
    if n == 0 || n > len {
        return usage(format!("cannot select {n} of {len} indices"));
    }
    if scores.iter().all(|s| !s.is_finite()) {
        return Err(Error::Selection("no finite log-likelihood score".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let key = |s: f64| if s.is_finite() { s } else { f64::NEG_INFINITY };
    order.sort_by(|&a, &b| key(scores[a]).total_cmp(&key(scores[b])).then(indices[a].cmp(&indices[b])));
    let ranks: Vec<usize> = if n == 1 {
        vec![((0.5 * len as f64).ceil() as usize).max(1)]
    } else {
        (0..n)
            .map(|k| {
                let q = k as f64 / (n - 1) as f64;
                ((q * len as f64).ceil() as usize).max(1)
            })
            .collect()
    };
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    for r in ranks {
        let mut pos = r - 1;
        while chosen.contains(&order[pos]) {
            pos = (pos + 1) % len;
        }
        chosen.push(order[pos]);
    }
    Ok(chosen.into_iter().map(|p| indices[p]).collect())
}

pub const DEFAULT_PRIOR_DRAWS: usize = 100;

/// `L̄_i = (1/J) Σ_j Σ_n log p(y_n | θ_j, σ_j, τ_i)` with `(θ_j, σ_j)` drawn
/// from the inference prior (truncated `N(0, 0.5²)` on `[-1, 1]` and
/// `Uniform(0, 0.05)`); the same prior draws are used for every `τ_i`.
pub fn mean_prior_loglik(taus: &[Vec<f64>], y_i: &[f64], spec: &SurrogateSpec, n_draws: usize, seed: u64) -> Result<Vec<f64>> {
    if n_draws == 0 {
        return usage("at least one prior draw is required");
    }
    let mut rng = rng_from_seed(seed);
    let prior: Vec<(f64, f64)> = (0..n_draws)
        .map(|_| {
            let theta = loop {
                let t: f64 = 0.5 * rng.sample::<f64, _>(rand_distr::StandardNormal);
                if t.abs() <= 1.0 {
                    break t;
                }
            };
            let sigma = 0.05 * (1.0 - rng.gen::<f64>());
            (theta, sigma)
        })
        .collect();
    Ok(taus
        .iter()
        .map(|tau| {
            prior
                .iter()
                .map(|&(theta, sigma)| {
                    let f = spec.eval(theta, tau);
                    y_i.iter()
                        .map(|&y| {
                            let z = (y - f) / sigma;
                            -0.5 * (2.0 * std::f64::consts::PI).ln() - sigma.ln() - 0.5 * z * z
                        })
                        .sum::<f64>()
                })
                .sum::<f64>()
                / n_draws as f64
        })
        .collect())
}

/// Selection over `remaining` by nearest-rank quantiles of `L̄`.
pub fn select_by_loglik_quantiles(
    remaining: &[usize],
    taus: &[Vec<f64>],
    y_i: &[f64],
    spec: &SurrogateSpec,
    n_mix: usize,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let sub: Vec<Vec<f64>> = remaining.iter().map(|&i| taus[i].clone()).collect();
    let scores = mean_prior_loglik(&sub, y_i, spec, n_draws, seed)?;
    quantile_select(remaining, &scores, n_mix)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Random,
    MaxKhat,
    Medoids,
    LoglikQuantile,
    /// Select the realization equal to the mean of the remaining ones; an
    /// error when the mean is not itself a member.
    Mean,
}

/// A strategy bound to the data it needs.
#[derive(Debug, Clone)]
pub enum Selector {
    Random { seed: u64 },
    /// Falls back to random selection until `k̂` values exist.
    MaxKhat { seed: u64 },
    Medoids { dist: DMatrix<f64> },
    /// Precomputed `L̄_i` for every index.
    LoglikQuantile { scores: Vec<f64> },
    /// Realizations as flat vectors.
    Mean { points: Vec<Vec<f64>> },
}

impl Selector {
    pub fn kind(&self) -> StrategyKind {
        match self {
            Selector::Random { .. } => StrategyKind::Random,
            Selector::MaxKhat { .. } => StrategyKind::MaxKhat,
            Selector::Medoids { .. } => StrategyKind::Medoids,
            Selector::LoglikQuantile { .. } => StrategyKind::LoglikQuantile,
            Selector::Mean { .. } => StrategyKind::Mean,
        }
    }

    /// Picks `n` indices of `remaining`. `khat` holds the most recent `k̂`
    /// per index; `round` numbers the outer iterations from 0.
    pub fn select(&self, remaining: &[usize], n: usize, khat: &BTreeMap<usize, f64>, round: usize) -> Result<Vec<usize>> {
        if remaining.is_empty() {
            return usage("no remaining indices to select from");
        }
        if n == 0 || n > remaining.len() {
            return usage(format!("cannot select {n} of {} indices", remaining.len()));
        }
        match self {
            Selector::Random { seed } => select_random(remaining, n, derive_seed(*seed, "select", round as u64)),
            Selector::MaxKhat { seed } => {
                if remaining.iter().all(|i| khat.contains_key(i)) {
                    top_khat(remaining, khat, n)
                } else {
                    select_random(remaining, n, derive_seed(*seed, "select", round as u64))
                }
            }
            Selector::Medoids { dist } => {
                let sub = DMatrix::from_fn(remaining.len(), remaining.len(), |a, b| dist[(remaining[a], remaining[b])]);
                Ok(k_medoids(&sub, n)?.into_iter().map(|i| remaining[i]).collect())
            }
            Selector::LoglikQuantile { scores } => {
                let sub: Vec<f64> = remaining.iter().map(|&i| scores[i]).collect();
                quantile_select(remaining, &sub, n)
            }
            Selector::Mean { points } => {
                if n != 1 {
                    return usage("the mean strategy selects a single index");
                }
                let dim = points[remaining[0]].len();
                let mut mean = vec![0.0; dim];
                for &i in remaining {
                    for (m, v) in mean.iter_mut().zip(&points[i]) {
                        *m += v / remaining.len() as f64;
                    }
                }
                remaining
                    .iter()
                    .copied()
                    .find(|&i| points[i].iter().zip(&mean).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0)))
                    .map(|i| vec![i])
                    .ok_or_else(|| {
                        Error::Selection(
                            "the mean of the remaining realizations is not one of them; averaging cannot shrink the index set"
                                .into(),
                        )
                    })
            }
        }
    }
}
