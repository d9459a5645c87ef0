//! Importance-weighted moment matching.
//!
//! Proposal draws are moved by affine maps whose parameters are the
//! importance-weighted moments of the current draws. The proposal density of
//! a moved draw follows from the change of variables,
//! `log q_T(Aθ + b) = log q(θ) - log|det A|`, so no draw is ever re-sampled.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::psis::{k_threshold, psis_smooth, PsisResult};
use crate::sampling::{weighted_cov, weighted_mean, DrawMatrix, LogWeights};

/// Default cap on candidate transformations per adaptation.
pub const DEFAULT_MAX_ITERS: usize = 30;

const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformKind {
    /// Mean shift.
    T1,
    /// Mean shift plus marginal rescaling.
    T2,
    /// Mean shift plus full covariance matching.
    T3,
}

#[derive(Debug, Clone)]
pub struct AffineMap {
    pub kind: TransformKind,
    pub linear: DMatrix<f64>,
    pub shift: DVector<f64>,
    pub log_abs_det_j: f64,
}

impl AffineMap {
    pub fn apply_point(&self, theta: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(theta);
        (&self.linear * x + &self.shift).iter().copied().collect()
    }

    pub fn apply(&self, draws: &DrawMatrix) -> Result<DrawMatrix> {
        draws.map_rows(draws.dim(), |r| self.apply_point(r))
    }
}

#[derive(Debug, Clone)]
pub struct IwmmResult {
    pub transformed: DrawMatrix,
    pub weights: LogWeights,
    pub k_hat_mm: f64,
    /// `k̂` of the untransformed proposal.
    pub k_hat_initial: f64,
    pub accepted_maps: Vec<AffineMap>,
    /// `k̂` after each accepted map.
    pub k_trace: Vec<f64>,
    pub success: bool,
    /// Number of target density evaluations performed.
    pub n_target_evals: u64,
    /// Number of proposal density evaluations performed.
    pub n_proposal_evals: u64,
    /// Number of candidate transformations tried.
    pub n_candidates: usize,
}

fn plain_mean_and_center(draws: &DrawMatrix) -> (DVector<f64>, DMatrix<f64>) {
    let mean = DVector::from_vec(draws.column_means());
    let mut centered = draws.to_matrix();
    for mut row in centered.row_iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v -= mean[j];
        }
    }
    (mean, centered)
}

fn check_condition(linear: &DMatrix<f64>) -> Result<()> {
    let sv = linear.singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(min > 0.0) || max / min > MAX_CONDITION {
        return Err(Error::DegenerateGeometry(format!(
            "affine map is ill-conditioned (condition number {:.3e})",
            max / min
        )));
    }
    Ok(())
}

fn build_map(kind: TransformKind, linear: DMatrix<f64>, plain_mean: &DVector<f64>, target_mean: &DVector<f64>, log_abs_det_j: f64) -> AffineMap {
    let shift = target_mean - &linear * plain_mean;
    AffineMap {
        kind,
        linear,
        shift,
        log_abs_det_j,
    }
}

/// Mean shift: `θ - θ̄ + θ̃`.
pub fn apply_t1(draws: &DrawMatrix, w: &LogWeights) -> Result<(DrawMatrix, AffineMap)> {
    let d = draws.dim();
    let plain = DVector::from_vec(draws.column_means());
    let weighted = DVector::from_vec(weighted_mean(draws, w)?);
    let map = build_map(TransformKind::T1, DMatrix::identity(d, d), &plain, &weighted, 0.0);
    let out = draws.map_rows(d, |r| {
        r.iter()
            .enumerate()
            .map(|(j, v)| v - plain[j] + weighted[j])
            .collect()
    })?;
    Ok((out, map))
}

/// Mean shift plus marginal variance matching.
///
/// Marginal variances use `1/S` normalization; the weighted variances are
/// taken about the weighted mean, so the output's plain variances equal them.
pub fn apply_t2(draws: &DrawMatrix, w: &LogWeights) -> Result<(DrawMatrix, AffineMap)> {
    let d = draws.dim();
    let (plain, centered) = plain_mean_and_center(draws);
    let weighted = DVector::from_vec(weighted_mean(draws, w)?);
    let s = draws.n_draws() as f64;
    let v: Vec<f64> = (0..d).map(|j| centered.column(j).norm_squared() / s).collect();
    let wcov = weighted_cov(draws, w)?;
    let vw: Vec<f64> = (0..d).map(|j| wcov[(j, j)]).collect();
    if let Some(j) = (0..d).find(|&j| !(v[j] > 0.0) || !(vw[j] > 0.0)) {
        return Err(Error::DegenerateGeometry(format!(
            "zero marginal variance in dimension {j}"
        )));
    }
    let scale: Vec<f64> = (0..d).map(|j| (vw[j] / v[j]).sqrt()).collect();
    let linear = DMatrix::from_diagonal(&DVector::from_vec(scale.clone()));
    check_condition(&linear)?;
    let log_det = 0.5 * (0..d).map(|j| vw[j].ln() - v[j].ln()).sum::<f64>();
    let map = build_map(TransformKind::T2, linear, &plain, &weighted, log_det);
    let out = draws.map_rows(d, |r| {
        r.iter()
            .enumerate()
            .map(|(j, x)| scale[j] * (x - plain[j]) + weighted[j])
            .collect()
    })?;
    Ok((out, map))
}

/// Mean shift plus covariance matching: `L̃ L⁻¹ (θ - θ̄) + θ̃`.
pub fn apply_t3(draws: &DrawMatrix, w: &LogWeights) -> Result<(DrawMatrix, AffineMap)> {
    let d = draws.dim();
    let (plain, centered) = plain_mean_and_center(draws);
    let weighted = DVector::from_vec(weighted_mean(draws, w)?);
    let sigma = centered.transpose() * &centered / draws.n_draws() as f64;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let wcov = weighted_cov(draws, w)?;
    let l = sigma
        .cholesky()
        .ok_or_else(|| Error::DegenerateGeometry("sample covariance is not positive definite".into()))?
        .l();
    let lw = wcov
        .cholesky()
        .ok_or_else(|| Error::DegenerateGeometry("weighted covariance is not positive definite".into()))?
        .l();
    let l_inv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::DegenerateGeometry("singular Cholesky factor".into()))?;
    let linear = &lw * l_inv;
    check_condition(&linear)?;
    let log_det: f64 = (0..d).map(|j| lw[(j, j)].ln() - l[(j, j)].ln()).sum();
    let map = build_map(TransformKind::T3, linear, &plain, &weighted, log_det);
    let moved = (&centered * map.linear.transpose()).transpose();
    let mut data = Vec::with_capacity(draws.n_draws() * d);
    for col in moved.column_iter() {
        data.extend(col.iter().zip(weighted.iter()).map(|(v, m)| v + m));
    }
    let out = DrawMatrix::new(data, draws.n_draws(), d)?;
    Ok((out, map))
}

fn apply_kind(kind: TransformKind, draws: &DrawMatrix, w: &LogWeights) -> Result<(DrawMatrix, AffineMap)> {
    match kind {
        TransformKind::T1 => apply_t1(draws, w),
        TransformKind::T2 => apply_t2(draws, w),
        TransformKind::T3 => apply_t3(draws, w),
    }
}

fn eval_all(f: &mut dyn FnMut(&[f64]) -> f64, draws: &DrawMatrix) -> Result<Vec<f64>> {
    draws
        .rows()
        .enumerate()
        .map(|(s, r)| {
            let v = f(r);
            if v.is_nan() {
                Err(Error::Evaluation { index: s })
            } else {
                Ok(v)
            }
        })
        .collect()
}

/// Runs moment matching from scratch, evaluating both densities on `draws`.
pub fn iwmm_adapt(
    target_logp: &mut dyn FnMut(&[f64]) -> f64,
    proposal_logp: &mut dyn FnMut(&[f64]) -> f64,
    draws: &DrawMatrix,
    max_iters: usize,
) -> Result<IwmmResult> {
    let proposal = eval_all(proposal_logp, draws)?;
    let target = eval_all(target_logp, draws)?;
    let initial: Vec<f64> = target.iter().zip(&proposal).map(|(t, p)| t - p).collect();
    let mut res = iwmm_adapt_from(target_logp, &proposal, &initial, draws, max_iters)?;
    res.n_target_evals += draws.n_draws() as u64;
    res.n_proposal_evals += draws.n_draws() as u64;
    Ok(res)
}

/// Moment matching given precomputed proposal log densities at `draws` and
/// the untransformed log ratios (any additive constant is allowed in the
/// ratios; only their shape enters the first `k̂`).
///
/// Transforms are tried in order T1, T2, T3; a candidate is accepted when
/// `k̂` strictly decreases, after which the schedule restarts at T1. The loop
/// ends on success, when T3 fails to improve, or after `max_iters`
/// candidates.
pub fn iwmm_adapt_from(
    target_logp: &mut dyn FnMut(&[f64]) -> f64,
    proposal_logp_at_draws: &[f64],
    initial_log_ratios: &[f64],
    draws: &DrawMatrix,
    max_iters: usize,
) -> Result<IwmmResult> {
    let s = draws.n_draws();
    if proposal_logp_at_draws.len() != s || initial_log_ratios.len() != s {
        return Err(Error::Usage("density values and draws differ in length".into()));
    }
    if let Some(index) = proposal_logp_at_draws.iter().position(|v| v.is_nan()) {
        return Err(Error::Evaluation { index });
    }
    let threshold = k_threshold(s);
    let mut current: PsisResult = psis_smooth(initial_log_ratios)?;
    let k_hat_initial = current.k_hat;
    let mut state = draws.clone();
    let mut cum_log_det = 0.0;
    let mut maps = Vec::new();
    let mut k_trace = Vec::new();
    let mut n_target_evals = 0u64;
    let mut n_candidates = 0usize;
    let schedule = [TransformKind::T1, TransformKind::T2, TransformKind::T3];
    let mut stage = 0usize;

    while current.k_hat >= threshold && n_candidates < max_iters && stage < schedule.len() {
        let kind = schedule[stage];
        let Ok((candidate, map)) = apply_kind(kind, &state, &current.smoothed) else {
            stage += 1;
            continue;
        };
        n_candidates += 1;
        let log_det = cum_log_det + map.log_abs_det_j;
        let target = eval_all(target_logp, &candidate)?;
        n_target_evals += s as u64;
        let ratios: Vec<f64> = target
            .iter()
            .zip(proposal_logp_at_draws)
            .map(|(t, q)| t - (q - log_det))
            .collect();
        match psis_smooth(&ratios) {
            Ok(next) if next.k_hat < current.k_hat => {
                state = candidate;
                cum_log_det = log_det;
                maps.push(map);
                k_trace.push(next.k_hat);
                current = next;
                stage = 0;
            }
            _ => stage += 1,
        }
    }

    Ok(IwmmResult {
        transformed: state,
        success: current.k_hat < threshold,
        k_hat_mm: current.k_hat,
        weights: current.smoothed,
        k_hat_initial,
        accepted_maps: maps,
        k_trace,
        n_target_evals,
        n_proposal_evals: 0,
        n_candidates,
    })
}
