//! Propagation of first-step uncertainty through a family of targets.
//!
//! Single-proposal mode repeatedly selects one remaining target, samples it
//! by HMC and tries to approximate every other remaining target by PSIS from
//! those draws, falling back to moment matching when enabled. Mixture mode
//! selects several targets per round, weights them by bridge-sampled
//! marginal likelihoods and uses their uniform mixture as the proposal.
//!
//! Importance sampling and moment matching run on the unconstrained scale.
//! Every resolved target keeps exactly `S` draws, constrained at pooling.
//!
//! Cost accounting: ratio evaluations (a likelihood difference that the
//! shared prior cancels out of) count toward `n_pointwise_loglik`, one per
//! draw; full log-density evaluations in moment matching and bridge
//! sampling count toward `n_logp`; `n_grad` comes only from HMC.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::hmc::{hmc_sample, EvalCounters, HmcConfig, HmcOutput};
use crate::iwmm::{iwmm_adapt_from, DEFAULT_MAX_ITERS};
use crate::mixture::{bridge_log_ml, build_mixture, mixture_log_ratios, BRIDGE_MAX_ITER, BRIDGE_TOL};
use crate::models::Family;
use crate::psis::{k_threshold, psis_smooth};
use crate::rng::derive_seed;
use crate::sampling::{resample, DrawMatrix, LogWeights};
use crate::selection::{Selector, StrategyKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    McmcBruteforce,
    PsisSingle,
    PsisIwmm,
    PsisMixture,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::McmcBruteforce => "mcmc_bruteforce",
            Method::PsisSingle => "psis_single",
            Method::PsisIwmm => "psis_iwmm",
            Method::PsisMixture => "psis_mixture",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcmc_bruteforce" => Ok(Method::McmcBruteforce),
            "psis_single" => Ok(Method::PsisSingle),
            "psis_iwmm" => Ok(Method::PsisIwmm),
            "psis_mixture" => Ok(Method::PsisMixture),
            _ => usage(format!("unknown method {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    McmcProposal,
    Psis,
    Iwmm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Limits {
    /// Cap on outer iterations; `None` means `m`.
    pub max_outer: Option<usize>,
    pub iwmm_max_iters: usize,
    /// Bridge-sampling auxiliary draws; `None` means `S`.
    pub bridge_n_aux: Option<usize>,
    pub bridge_tol: f64,
    pub bridge_max_iter: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_outer: None,
            iwmm_max_iters: DEFAULT_MAX_ITERS,
            bridge_n_aux: None,
            bridge_tol: BRIDGE_TOL,
            bridge_max_iter: BRIDGE_MAX_ITER,
        }
    }
}

/// JSON has no infinities, so non-finite values are written as strings.
mod float_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else if v.is_nan() {
            Repr::Text("nan".into())
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "nan" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => Err(E::custom(format!("invalid number {t:?}"))),
            },
        }
    }

    pub mod plain {
        use super::*;
        pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
            to_repr(*v).serialize(s)
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
            from_repr(Repr::deserialize(d)?)
        }
    }

    pub mod option {
        use super::*;
        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            v.map(to_repr).serialize(s)
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<Repr>::deserialize(d)?.map(from_repr).transpose()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcSummary {
    pub divergences: usize,
    #[serde(with = "float_repr::plain")]
    pub max_split_rhat: f64,
    pub accept_rate: f64,
}

impl HmcSummary {
    fn of(out: &HmcOutput) -> Self {
        Self {
            divergences: out.diagnostics.divergences,
            max_split_rhat: out.diagnostics.split_rhat.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            accept_rate: out.diagnostics.accept_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub index: usize,
    pub route: Route,
    /// Outer iteration (from 0) in which the target was resolved.
    pub iteration: usize,
    /// PSIS diagnostic that decided the route; absent for MCMC targets.
    #[serde(with = "float_repr::option")]
    pub k_hat: Option<f64>,
    #[serde(with = "float_repr::option")]
    pub k_hat_mm: Option<f64>,
    /// Targets whose HMC draws formed the proposal.
    pub proposals: Vec<usize>,
    /// Importance-sampling attempts made before resolution.
    pub n_attempts: usize,
    pub hmc: Option<HmcSummary>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounters {
    pub hmc: EvalCounters,
    pub psis: EvalCounters,
    pub iwmm: EvalCounters,
    pub bridge: EvalCounters,
}

impl PhaseCounters {
    pub fn total(&self) -> EvalCounters {
        self.hmc + self.psis + self.iwmm + self.bridge
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropagationReport {
    pub family: String,
    pub method: Method,
    pub strategy: Option<StrategyKind>,
    pub n_mix: Option<usize>,
    pub m: usize,
    pub s: usize,
    pub k_threshold: f64,
    pub param_names: Vec<String>,
    /// Resolved targets in index order.
    pub targets: Vec<TargetRecord>,
    pub phases: PhaseCounters,
    pub totals: EvalCounters,
    pub n_mcmc_runs: usize,
    pub n_outer: usize,
    /// Constrained draws of every resolved target.
    #[serde(skip)]
    pub draws: BTreeMap<usize, DrawMatrix>,
}

impl PropagationReport {
    pub fn is_complete(&self) -> bool {
        self.targets.len() == self.m && self.draws.len() == self.m
    }

    pub fn record(&self, index: usize) -> Option<&TargetRecord> {
        self.targets.iter().find(|t| t.index == index)
    }

    pub fn route_counts(&self) -> BTreeMap<Route, usize> {
        let mut c = BTreeMap::new();
        for t in &self.targets {
            *c.entry(t.route).or_insert(0) += 1;
        }
        c
    }
}

impl PartialOrd for Route {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Route {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

/// All `m·S` draws in target order.
pub fn pool_posterior(report: &PropagationReport) -> Result<DrawMatrix> {
    if !report.is_complete() {
        return usage(format!(
            "{} of {} targets are unresolved",
            report.m - report.draws.len().min(report.m),
            report.m
        ));
    }
    let parts: Vec<&DrawMatrix> = report.draws.values().collect();
    DrawMatrix::vstack(&parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// `(n_logp + n_pointwise_loglik) / baseline.n_logp`.
    pub logp_ratio: f64,
    pub grad_ratio: f64,
    pub run_fraction: f64,
    pub n_mcmc_runs: usize,
    pub m: usize,
}

pub fn cost_report(report: &PropagationReport, baseline: &EvalCounters) -> Result<CostReport> {
    if baseline.n_logp == 0 || baseline.n_grad == 0 {
        return usage("baseline counters must be nonzero");
    }
    if report.m == 0 {
        return usage("report has no targets");
    }
    Ok(CostReport {
        logp_ratio: (report.totals.n_logp + report.totals.n_pointwise_loglik) as f64 / baseline.n_logp as f64,
        grad_ratio: report.totals.n_grad as f64 / baseline.n_grad as f64,
        run_fraction: report.n_mcmc_runs as f64 / report.m as f64,
        n_mcmc_runs: report.n_mcmc_runs,
        m: report.m,
    })
}

/// The likelihood part of a log ratio for target `i`; the shared prior and,
/// when `diff_rows` is set, the rows common to all members cancel.
fn ratio_loglik(family: &Family, i: usize, u: &[f64]) -> f64 {
    match &family.diff_rows {
        Some(rows) => family.member(i).loglik_rows(u, rows),
        None => family.member(i).loglik(u),
    }
}

fn eval_rows(draws: &DrawMatrix, mut f: impl FnMut(&[f64]) -> f64) -> Result<Vec<f64>> {
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

/// `k̂` and smoothed weights; a ratio vector PSIS cannot fit is unreliable.
fn psis_or_unreliable(log_ratios: &[f64]) -> (f64, Option<LogWeights>) {
    match psis_smooth(log_ratios) {
        Ok(r) => (r.k_hat, Some(r.smoothed)),
        Err(_) => (f64::INFINITY, None),
    }
}

struct State<'a> {
    family: &'a Family,
    cfg: &'a HmcConfig,
    method: Method,
    strategy: Option<StrategyKind>,
    n_mix: Option<usize>,
    threshold: f64,
    remaining: BTreeSet<usize>,
    records: BTreeMap<usize, TargetRecord>,
    draws: BTreeMap<usize, DrawMatrix>,
    attempts: BTreeMap<usize, usize>,
    last_khat: BTreeMap<usize, f64>,
    phases: PhaseCounters,
    n_mcmc_runs: usize,
    n_outer: usize,
}

impl<'a> State<'a> {
    fn new(family: &'a Family, cfg: &'a HmcConfig, method: Method, strategy: Option<StrategyKind>, n_mix: Option<usize>) -> Self {
        Self {
            family,
            cfg,
            method,
            strategy,
            n_mix,
            threshold: k_threshold(cfg.n_draws()),
            remaining: (0..family.len()).collect(),
            records: BTreeMap::new(),
            draws: BTreeMap::new(),
            attempts: BTreeMap::new(),
            last_khat: BTreeMap::new(),
            phases: PhaseCounters::default(),
            n_mcmc_runs: 0,
            n_outer: 0,
        }
    }

    fn report(&self) -> PropagationReport {
        PropagationReport {
            family: self.family.name.clone(),
            method: self.method,
            strategy: self.strategy,
            n_mix: self.n_mix,
            m: self.family.len(),
            s: self.cfg.n_draws(),
            k_threshold: self.threshold,
            param_names: self.family.param_names(),
            targets: self.records.values().cloned().collect(),
            phases: self.phases,
            totals: self.phases.total(),
            n_mcmc_runs: self.n_mcmc_runs,
            n_outer: self.n_outer,
            draws: self.draws.clone(),
        }
    }

    fn fail(&self, target: Option<usize>, err: Error) -> Error {
        let message = match target {
            Some(t) => format!("target {t}: {err}"),
            None => err.to_string(),
        };
        Error::Orchestration {
            target,
            message,
            partial: Some(Box::new(self.report())),
        }
    }

    fn constrain(&self, i: usize, u: &DrawMatrix) -> Result<DrawMatrix> {
        let model = self.family.member(i);
        let d = self.family.param_names().len();
        u.map_rows(d, |r| model.constrain(r))
    }

    /// Runs HMC on each of `indices` concurrently and resolves them.
    fn run_mcmc(&mut self, indices: &[usize]) -> Result<Vec<(usize, DrawMatrix)>> {
        let outs: Vec<(usize, Result<HmcOutput>)> = indices
            .par_iter()
            .map(|&i| (i, hmc_sample(self.family.member(i), self.cfg, i as u64)))
            .collect();
        let mut unconstrained = Vec::with_capacity(indices.len());
        for (i, out) in outs {
            let out = out.map_err(|e| self.fail(Some(i), e))?;
            self.phases.hmc += out.counters;
            self.n_mcmc_runs += 1;
            self.remaining.remove(&i);
            self.records.insert(
                i,
                TargetRecord {
                    index: i,
                    route: Route::McmcProposal,
                    iteration: self.n_outer,
                    k_hat: None,
                    k_hat_mm: None,
                    proposals: vec![],
                    n_attempts: self.attempts.get(&i).copied().unwrap_or(0),
                    hmc: Some(HmcSummary::of(&out)),
                },
            );
            self.draws.insert(i, out.draws);
            unconstrained.push((i, out.unconstrained));
        }
        Ok(unconstrained)
    }

    fn resolve_by_is(&mut self, i: usize, route: Route, k_hat: f64, k_hat_mm: Option<f64>, proposals: Vec<usize>, u: DrawMatrix) -> Result<()> {
        let draws = self.constrain(i, &u)?;
        self.remaining.remove(&i);
        self.records.insert(
            i,
            TargetRecord {
                index: i,
                route,
                iteration: self.n_outer,
                k_hat: Some(k_hat),
                k_hat_mm,
                proposals,
                n_attempts: self.attempts.get(&i).copied().unwrap_or(0),
                hmc: None,
            },
        );
        self.draws.insert(i, draws);
        Ok(())
    }

    fn check_outer_limit(&self, max_outer: usize) -> Result<()> {
        if self.n_outer >= max_outer && !self.remaining.is_empty() {
            return Err(self.fail(
                None,
                Error::Usage(format!(
                    "{} targets unresolved after {max_outer} outer iterations",
                    self.remaining.len()
                )),
            ));
        }
        Ok(())
    }

    fn remaining_vec(&self) -> Vec<usize> {
        self.remaining.iter().copied().collect()
    }
}

struct PsisAttempt {
    index: usize,
    k_hat: f64,
    log_ratios: Vec<f64>,
    weights: Option<LogWeights>,
}

/// Runs HMC on every target independently.
pub fn run_bruteforce(family: &Family, cfg: &HmcConfig) -> Result<PropagationReport> {
    check_family(family)?;
    cfg.validate()?;
    let mut st = State::new(family, cfg, Method::McmcBruteforce, None, None);
    let all = st.remaining_vec();
    st.run_mcmc(&all)?;
    st.n_outer = 1;
    Ok(st.report())
}

fn check_family(family: &Family) -> Result<()> {
    if family.is_empty() {
        return usage("the target family is empty");
    }
    let d = family.dim();
    if family.members.iter().any(|m| m.dim() != d) {
        return usage("family members differ in dimension");
    }
    Ok(())
}

/// Single-proposal propagation; `use_iwmm` enables the moment-matching
/// fallback.
pub fn run_single_proposal(
    family: &Family,
    selector: &Selector,
    cfg: &HmcConfig,
    limits: &Limits,
    use_iwmm: bool,
) -> Result<PropagationReport> {
    check_family(family)?;
    cfg.validate()?;
    let method = if use_iwmm { Method::PsisIwmm } else { Method::PsisSingle };
    let mut st = State::new(family, cfg, method, Some(selector.kind()), None);
    let max_outer = limits.max_outer.unwrap_or(family.len());
    let s = cfg.n_draws();

    while !st.remaining.is_empty() {
        st.check_outer_limit(max_outer)?;
        let remaining = st.remaining_vec();
        let star = selector
            .select(&remaining, 1, &st.last_khat, st.n_outer)
            .map_err(|e| st.fail(None, e))?[0];
        let (_, u) = st.run_mcmc(&[star])?.pop().expect("one proposal");
        let targets = st.remaining_vec();
        if targets.is_empty() {
            st.n_outer += 1;
            break;
        }

        let proposal_ll = eval_rows(&u, |r| ratio_loglik(family, star, r)).map_err(|e| st.fail(Some(star), e))?;
        st.phases.psis.n_pointwise_loglik += s as u64;

        let attempts: Vec<Result<PsisAttempt>> = targets
            .par_iter()
            .map(|&i| {
                let ll = eval_rows(&u, |r| ratio_loglik(family, i, r))?;
                let log_ratios: Vec<f64> = ll.iter().zip(&proposal_ll).map(|(a, b)| a - b).collect();
                let (k_hat, weights) = psis_or_unreliable(&log_ratios);
                Ok(PsisAttempt {
                    index: i,
                    k_hat,
                    log_ratios,
                    weights,
                })
            })
            .collect();
        let mut failed = Vec::new();
        for (a, &i) in attempts.into_iter().zip(&targets) {
            let a = a.map_err(|e| st.fail(Some(i), e))?;
            st.phases.psis.n_pointwise_loglik += s as u64;
            *st.attempts.entry(i).or_insert(0) += 1;
            st.last_khat.insert(i, a.k_hat);
            match &a.weights {
                Some(w) if a.k_hat < st.threshold => {
                    let draws = resample(&u, w, s, derive_seed(cfg.seed, "resample", i as u64))
                        .map_err(|e| st.fail(Some(i), e))?;
                    st.resolve_by_is(i, Route::Psis, a.k_hat, None, vec![star], draws)?;
                }
                _ => failed.push(a),
            }
        }

        if use_iwmm && !failed.is_empty() {
            let proposal_logp = eval_rows(&u, |r| family.member(star).logp(r)).map_err(|e| st.fail(Some(star), e))?;
            st.phases.iwmm.n_logp += s as u64;
            let results: Vec<_> = failed
                .par_iter()
                .map(|a| {
                    let model = family.member(a.index);
                    let mut target = |r: &[f64]| model.logp(r);
                    iwmm_adapt_from(&mut target, &proposal_logp, &a.log_ratios, &u, limits.iwmm_max_iters)
                })
                .collect();
            for (a, res) in failed.iter().zip(results) {
                let i = a.index;
                let res = res.map_err(|e| st.fail(Some(i), e))?;
                st.phases.iwmm.n_logp += res.n_target_evals;
                st.last_khat.insert(i, res.k_hat_mm);
                if res.success {
                    let draws = resample(&res.transformed, &res.weights, s, derive_seed(cfg.seed, "resample", i as u64))
                        .map_err(|e| st.fail(Some(i), e))?;
                    st.resolve_by_is(i, Route::Iwmm, a.k_hat, Some(res.k_hat_mm), vec![star], draws)?;
                }
            }
        }
        st.n_outer += 1;
    }
    Ok(st.report())
}

/// Mixture-proposal propagation with `n_mix` components per round.
pub fn run_mixture_proposal(
    family: &Family,
    selector: &Selector,
    n_mix: usize,
    cfg: &HmcConfig,
    limits: &Limits,
) -> Result<PropagationReport> {
    check_family(family)?;
    cfg.validate()?;
    if n_mix < 2 || family.len() <= n_mix {
        return usage(format!("mixture mode needs m > n_mix ≥ 2 (m = {}, n_mix = {n_mix})", family.len()));
    }
    let mut st = State::new(family, cfg, Method::PsisMixture, Some(selector.kind()), Some(n_mix));
    let max_outer = limits.max_outer.unwrap_or(family.len());
    let s = cfg.n_draws();
    let n_aux = limits.bridge_n_aux.unwrap_or(s);

    while st.remaining.len() > n_mix {
        st.check_outer_limit(max_outer)?;
        let remaining = st.remaining_vec();
        let chosen = selector
            .select(&remaining, n_mix, &st.last_khat, st.n_outer)
            .map_err(|e| st.fail(None, e))?;
        let components = st.run_mcmc(&chosen)?;

        let estimates: Vec<_> = components
            .par_iter()
            .map(|(j, u)| {
                let model = family.member(*j);
                let mut f = |r: &[f64]| model.logp(r);
                bridge_log_ml(
                    &mut f,
                    u,
                    n_aux,
                    derive_seed(cfg.seed, "bridge", *j as u64),
                    limits.bridge_tol,
                    limits.bridge_max_iter,
                )
            })
            .collect();
        let mut log_ml = Vec::with_capacity(n_mix);
        for ((j, _), est) in components.iter().zip(estimates) {
            let est = est.map_err(|e| st.fail(Some(*j), Error::Usage(format!("bridge sampling for component {j}: {e}"))))?;
            st.phases.bridge.n_logp += est.n_evals;
            log_ml.push(est.log_ml);
        }
        let mut mix = build_mixture(components, s, derive_seed(cfg.seed, "mixture", st.n_outer as u64))
            .map_err(|e| st.fail(None, e))?;
        mix.set_log_ml(log_ml).map_err(|e| st.fail(None, e))?;
        let cache = mix
            .cache_component_loglik(|j, r| ratio_loglik(family, mix.component_indices[j], r))
            .map_err(|e| st.fail(None, e))?;
        st.phases.psis.n_pointwise_loglik += cache.n_evals();
        let denominators = mix.log_denominators(&cache).map_err(|e| st.fail(None, e))?;

        let targets = st.remaining_vec();
        let attempts: Vec<Result<(f64, Option<LogWeights>)>> = targets
            .par_iter()
            .map(|&i| {
                let ll = eval_rows(&mix.pooled, |r| ratio_loglik(family, i, r))?;
                let log_ratios = mixture_log_ratios(&ll, &denominators)?;
                Ok(psis_or_unreliable(&log_ratios))
            })
            .collect();
        for (a, &i) in attempts.into_iter().zip(&targets) {
            let (k_hat, weights) = a.map_err(|e| st.fail(Some(i), e))?;
            st.phases.psis.n_pointwise_loglik += s as u64;
            *st.attempts.entry(i).or_insert(0) += 1;
            st.last_khat.insert(i, k_hat);
            if let Some(w) = weights.filter(|_| k_hat < st.threshold) {
                let draws = resample(&mix.pooled, &w, s, derive_seed(cfg.seed, "resample", i as u64))
                    .map_err(|e| st.fail(Some(i), e))?;
                st.resolve_by_is(i, Route::Psis, k_hat, None, mix.component_indices.clone(), draws)?;
            }
        }
        st.n_outer += 1;
    }
    if !st.remaining.is_empty() {
        let stragglers = st.remaining_vec();
        st.run_mcmc(&stragglers)?;
        st.n_outer += 1;
    }
    Ok(st.report())
}

/// Dispatches on `method`. `selector` is unused by brute force and
/// `n_mix` only by mixture mode.
pub fn propagate(
    family: &Family,
    method: Method,
    selector: &Selector,
    n_mix: usize,
    cfg: &HmcConfig,
    limits: &Limits,
) -> Result<PropagationReport> {
    match method {
        Method::McmcBruteforce => run_bruteforce(family, cfg),
        Method::PsisSingle => run_single_proposal(family, selector, cfg, limits, false),
        Method::PsisIwmm => run_single_proposal(family, selector, cfg, limits, true),
        Method::PsisMixture => run_mixture_proposal(family, selector, n_mix, cfg, limits),
    }
}
