//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any fails. `ACCEPTANCE_ONLY=1,5` restricts the run.

use std::panic::{catch_unwind, AssertUnwindSafe};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use twostep::hmc::{EvalCounters, HmcConfig};
use twostep::imputation::{chained_impute, inject_missingness};
use twostep::iwmm::{apply_t1, apply_t2, apply_t3};
use twostep::mixture::{bridge_log_ml, build_mixture, mixture_log_ratios, BRIDGE_MAX_ITER, BRIDGE_TOL};
use twostep::models::regression::regression_family;
use twostep::models::surrogate::{generate_training_data, surrogate_inference_family};
use twostep::models::{
    generate_regression_data, Model, PriorKind, RegressionModel, RegressionPrior, SurrogateInferenceModel,
    SurrogateSpec, SurrogateTrainingModel,
};
use twostep::orchestrator::{cost_report, pool_posterior, Method, PropagationReport, Route};
use twostep::psis::{gpd_fit_tail, k_threshold, psis_smooth};
use twostep::rng::rng_from_seed;
use twostep::sampling::{normalize_log_weights, DrawMatrix};
use twostep::selection::{Selector, StrategyKind};
use twostep::study::{prepare_study, run_prepared, Study, StudyConfig};
use twostep::summary::{compare_reports, summarize};

const LOGISTIC_MAX_RUNS: usize = 10;
const LOGISTIC_MEAN_TOL: f64 = 0.01;
const PCE_SEEDS: u64 = 20;
const PCE_MEDIAN_RUNS: f64 = 20.0;
const PCE_GRAD_RATIO: f64 = 0.3;
const PCE_MEAN_TOL: f64 = 0.1;
const IMPUTATION_GRAD_RATIO: f64 = 0.5;
const IMPUTATION_RUNS: (usize, usize) = (1, 55);
const IMPUTATION_MOMENT_TOL: f64 = 0.0125;
const IMPUTATION_QUANTILE_TOL: f64 = 0.025;

/// A run and the brute-force counters it is measured against.
struct Costed {
    label: String,
    report: PropagationReport,
    baseline: EvalCounters,
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn study(study: Study, method: Method, strategy: StrategyKind, seed: u64) -> StudyConfig {
    StudyConfig {
        study,
        method,
        strategy,
        seed,
        ..StudyConfig::default()
    }
}

fn pooled_mean(r: &PropagationReport, j: usize) -> f64 {
    pool_posterior(r).expect("complete report").column_means()[j]
}

fn criterion_1(costed: &mut Vec<Costed>) -> Outcome {
    let cfg = study(Study::SurrogateLogistic, Method::PsisIwmm, StrategyKind::Random, 1);
    let prepared = prepare_study(&cfg).expect("logistic study prepares");
    let bf = run_prepared(&cfg, &prepared, Method::McmcBruteforce).expect("brute force");
    let r = run_prepared(&cfg, &prepared, Method::PsisIwmm).expect("psis_iwmm");
    let d = (pooled_mean(&r, 0) - pooled_mean(&bf, 0)).abs();
    let pass = r.is_complete() && r.n_mcmc_runs <= LOGISTIC_MAX_RUNS && d < LOGISTIC_MEAN_TOL;
    let detail = format!(
        "logistic m=100: n_mcmc_runs={} (≤ {LOGISTIC_MAX_RUNS}), |Δ pooled mean θ_I|={d:.3e} (< {LOGISTIC_MEAN_TOL})",
        r.n_mcmc_runs
    );
    for (label, method) in [("logistic psis_single", Method::PsisSingle), ("logistic psis_mixture", Method::PsisMixture)] {
        let extra = run_prepared(&cfg, &prepared, method).expect("logistic variant");
        costed.push(Costed {
            label: label.into(),
            report: extra,
            baseline: bf.totals,
        });
    }
    costed.push(Costed {
        label: "logistic psis_iwmm".into(),
        report: r,
        baseline: bf.totals,
    });
    costed.push(Costed {
        label: "logistic bruteforce".into(),
        baseline: bf.totals,
        report: bf,
    });
    outcome(pass, detail)
}

fn criterion_2(costed: &mut Vec<Costed>) -> Outcome {
    let mut runs = Vec::new();
    let mut grad_ratios = Vec::new();
    let mut worst_delta = 0.0f64;
    for seed in 1..=PCE_SEEDS {
        let cfg = study(Study::SurrogatePce, Method::PsisIwmm, StrategyKind::Random, seed);
        let prepared = prepare_study(&cfg).expect("pce study prepares");
        let bf = run_prepared(&cfg, &prepared, Method::McmcBruteforce).expect("brute force");
        let r = run_prepared(&cfg, &prepared, Method::PsisIwmm).expect("psis_iwmm");
        let cmp = compare_reports(&bf, &r).expect("comparable");
        worst_delta = worst_delta.max(cmp[0].d_mean);
        grad_ratios.push(cost_report(&r, &bf.totals).expect("cost").grad_ratio);
        runs.push(r.n_mcmc_runs as f64);
        costed.push(Costed {
            label: format!("pce seed {seed}"),
            report: r,
            baseline: bf.totals,
        });
    }
    runs.sort_by(f64::total_cmp);
    let median = 0.5 * (runs[runs.len() / 2 - 1] + runs[runs.len() / 2]);
    let mean_grad = grad_ratios.iter().sum::<f64>() / grad_ratios.len() as f64;
    let pass = median <= PCE_MEDIAN_RUNS && mean_grad <= PCE_GRAD_RATIO && worst_delta < PCE_MEAN_TOL;
    outcome(
        pass,
        format!(
            "pce d=5 over {PCE_SEEDS} seeds: median n_mcmc_runs={median} (≤ {PCE_MEDIAN_RUNS}), mean grad_ratio={mean_grad:.3} (≤ {PCE_GRAD_RATIO}), max pooled |Δmean|={worst_delta:.3e} (< {PCE_MEAN_TOL}); runs={runs:?}"
        ),
    )
}

fn criterion_3(costed: &mut Vec<Costed>) -> Outcome {
    let cfg = study(Study::Imputation, Method::PsisIwmm, StrategyKind::Medoids, 1);
    let prepared = prepare_study(&cfg).expect("imputation study prepares");
    let bf = run_prepared(&cfg, &prepared, Method::McmcBruteforce).expect("brute force");
    let r = run_prepared(&cfg, &prepared, Method::PsisIwmm).expect("psis_iwmm");
    let cost = cost_report(&r, &bf.totals).expect("cost");
    let cmp = compare_reports(&bf, &r).expect("comparable");
    let per_target = &cmp[1];
    let pass = cost.grad_ratio < IMPUTATION_GRAD_RATIO
        && (IMPUTATION_RUNS.0..=IMPUTATION_RUNS.1).contains(&r.n_mcmc_runs)
        && per_target.d_mean < IMPUTATION_MOMENT_TOL
        && per_target.d_sd < IMPUTATION_MOMENT_TOL
        && per_target.d_q05 < IMPUTATION_QUANTILE_TOL
        && per_target.d_q95 < IMPUTATION_QUANTILE_TOL;
    let detail = format!(
        "imputation N=100 p=10 π=0.15 medoids: grad_ratio={:.4} (< {IMPUTATION_GRAD_RATIO}), n_mcmc_runs={} (in [{}, {}]), per-target |Δmean|={:.4} |Δsd|={:.4} (< {IMPUTATION_MOMENT_TOL}), |Δq05|={:.4} |Δq95|={:.4} (< {IMPUTATION_QUANTILE_TOL}), pooled |Δmean|={:.4}",
        cost.grad_ratio,
        r.n_mcmc_runs,
        IMPUTATION_RUNS.0,
        IMPUTATION_RUNS.1,
        per_target.d_mean,
        per_target.d_sd,
        per_target.d_q05,
        per_target.d_q95,
        cmp[0].d_mean
    );
    let mixture = run_prepared(&cfg, &prepared, Method::PsisMixture).expect("psis_mixture");
    costed.push(Costed {
        label: "imputation psis_mixture".into(),
        report: mixture,
        baseline: bf.totals,
    });
    costed.push(Costed {
        label: "imputation psis_iwmm".into(),
        report: r,
        baseline: bf.totals,
    });
    outcome(pass, detail)
}

fn criterion_4(costed: &[Costed]) -> Outcome {
    let mut failures = Vec::new();
    for c in costed {
        // grad_ratio ≤ runs/m, compared in integers.
        let lhs = c.report.totals.n_grad as u128 * c.report.m as u128;
        let rhs = c.report.n_mcmc_runs as u128 * c.baseline.n_grad as u128;
        if lhs > rhs {
            failures.push(c.label.clone());
        }
    }
    outcome(
        failures.is_empty() && !costed.is_empty(),
        format!("grad_ratio ≤ n_mcmc_runs/m over {} configurations; violations: {failures:?}", costed.len()),
    )
}

fn fd_relative_error(model: &dyn Model, u: &[f64]) -> f64 {
    let mut g = vec![0.0; u.len()];
    model.logp_grad(u, &mut g);
    let mut worst = 0.0f64;
    for j in 0..u.len() {
        let h = 1e-5 * u[j].abs().max(1.0);
        let mut up = u.to_vec();
        let mut dn = u.to_vec();
        up[j] += h;
        dn[j] -= h;
        let fd = (model.logp(&up) - model.logp(&dn)) / (2.0 * h);
        let scale = g[j].abs().max(fd.abs()).max(1.0);
        worst = worst.max((g[j] - fd).abs() / scale);
    }
    worst
}

fn gaussian_draws(n: usize, mean: &[f64], chol: &DMatrix<f64>, seed: u64) -> DrawMatrix {
    let mut rng = rng_from_seed(seed);
    let d = mean.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = chol * z;
            (0..d).map(|j| x[j] + mean[j]).collect()
        })
        .collect();
    DrawMatrix::from_rows(&rows).unwrap()
}

fn plain_moments(d: &DrawMatrix) -> (Vec<f64>, DMatrix<f64>) {
    let n = d.n_draws() as f64;
    let k = d.dim();
    let mean: Vec<f64> = (0..k).map(|j| d.rows().map(|r| r[j]).sum::<f64>() / n).collect();
    let cov = DMatrix::from_fn(k, k, |a, b| d.rows().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / n);
    (mean, cov)
}

fn weighted_moments(d: &DrawMatrix, w: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let k = d.dim();
    let total: f64 = w.iter().sum();
    let mean: Vec<f64> = (0..k).map(|j| d.rows().zip(w).map(|(r, w)| w * r[j]).sum::<f64>() / total).collect();
    let cov = DMatrix::from_fn(k, k, |a, b| {
        d.rows().zip(w).map(|(r, w)| w * (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / total
    });
    (mean, cov)
}

fn gaussian_logpdf(x: &[f64], mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = x.len();
    let chol = cov.clone().cholesky().unwrap();
    let diff = DVector::from_column_slice(x) - mean;
    let z = chol.l().solve_lower_triangular(&diff).unwrap();
    let log_det: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared())
}

fn criterion_5() -> Outcome {
    let mut parts: Vec<(char, bool, String)> = Vec::new();

    // (a) Moment-matching exactness.
    {
        let chol = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.4, 0.8, 0.0, -0.3, 0.2, 1.5]);
        let draws = gaussian_draws(2000, &[0.5, -1.0, 2.0], &chol, 1);
        let lr: Vec<f64> = draws.rows().map(|r| 0.6 * r[0] - 0.2 * r[1] * r[1] + 0.1 * r[2]).collect();
        let w = normalize_log_weights(&lr).unwrap();
        let (wm, wc) = weighted_moments(&draws, &w.weights);
        let mut err = 0.0f64;
        let (t1, _) = apply_t1(&draws, &w).unwrap();
        let (m1, _) = plain_moments(&t1);
        err = err.max(m1.iter().zip(&wm).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let (t2, _) = apply_t2(&draws, &w).unwrap();
        let (m2, c2) = plain_moments(&t2);
        err = err.max(m2.iter().zip(&wm).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        err = err.max((0..3).map(|j| (c2[(j, j)] - wc[(j, j)]).abs()).fold(0.0, f64::max));
        let (t3, _) = apply_t3(&draws, &w).unwrap();
        let (m3, c3) = plain_moments(&t3);
        err = err.max(m3.iter().zip(&wm).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        err = err.max((&c3 - &wc).abs().max());
        parts.push(('a', err < 1e-10, format!("max moment error {err:.1e}")));
    }

    // (b) Change of variables on a Gaussian proposal.
    {
        let mean = DVector::from_vec(vec![1.0, -2.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let chol = cov.clone().cholesky().unwrap().l();
        let draws = gaussian_draws(500, mean.as_slice(), &chol, 2);
        let lr: Vec<f64> = draws.rows().map(|r| -0.3 * (r[0] - 2.0).powi(2) + 0.2 * r[1]).collect();
        let w = normalize_log_weights(&lr).unwrap();
        let (moved, map) = apply_t3(&draws, &w).unwrap();
        let new_mean = &map.linear * &mean + &map.shift;
        let new_cov = &map.linear * &cov * map.linear.transpose();
        let err = draws
            .rows()
            .zip(moved.rows())
            .map(|(x, y)| (gaussian_logpdf(x, &mean, &cov) - map.log_abs_det_j - gaussian_logpdf(y, &new_mean, &new_cov)).abs())
            .fold(0.0, f64::max);
        parts.push(('b', err < 1e-10, format!("max density error {err:.1e}")));
    }

    // (c) PSIS order preservation and normalization.
    {
        let mut rng = rng_from_seed(3);
        let lr: Vec<f64> = (0..4000).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let res = psis_smooth(&lr).unwrap();
        let mut order: Vec<usize> = (0..lr.len()).collect();
        order.sort_by(|&a, &b| lr[a].total_cmp(&lr[b]));
        let monotone = order.windows(2).all(|p| res.smoothed.weights[p[0]] <= res.smoothed.weights[p[1]]);
        let sum_err = (res.smoothed.weights.iter().sum::<f64>() - 1.0).abs();
        parts.push(('c', monotone && sum_err < 1e-12, format!("monotone={monotone}, |Σw-1|={sum_err:.1e}")));
    }

    // (d) GPD shape recovery.
    {
        let mut worst = 0.0f64;
        for (i, k) in [0.0, 0.25, 0.5].into_iter().enumerate() {
            let mut rng = rng_from_seed(40 + i as u64);
            let mut x: Vec<f64> = (0..100_000)
                .map(|_| {
                    let u: f64 = rng.gen();
                    if k == 0.0 {
                        -(1.0 - u).ln()
                    } else {
                        ((1.0 - u).powf(-k) - 1.0) / k
                    }
                })
                .collect();
            x.sort_by(f64::total_cmp);
            let (k_hat, _) = gpd_fit_tail(&x).unwrap();
            worst = worst.max((k_hat - k).abs());
        }
        parts.push(('d', worst < 0.02, format!("max |k̂-k|={worst:.4}")));
    }

    // (e) Bridge sampling on the standard normal kernel.
    {
        let draws = gaussian_draws(4000, &[0.0], &DMatrix::identity(1, 1), 5);
        let mut f = |x: &[f64]| -0.5 * x[0] * x[0];
        let est = bridge_log_ml(&mut f, &draws, 4000, 6, BRIDGE_TOL, BRIDGE_MAX_ITER).unwrap();
        let err = (est.log_ml - 0.918_938_533_204_672_7).abs();
        parts.push(('e', err < 0.01, format!("log Z={:.5}", est.log_ml)));
    }

    // (f) Pointwise cancellation across imputed datasets.
    {
        let (full, _) = generate_regression_data(60, 4, 7).unwrap();
        let obs = inject_missingness(&full, 0.2, 8).unwrap();
        let imputed = chained_impute(&obs, 4, 10, 9).unwrap();
        let prior = RegressionPrior::from_observed(&obs, PriorKind::Standard).unwrap();
        let models: Vec<RegressionModel> = imputed.iter().map(|d| RegressionModel::new(d, prior).unwrap()).collect();
        let rows = obs.missing_rows();
        let mut rng = rng_from_seed(10);
        let mut worst = 0.0f64;
        for a in 0..4 {
            for b in 0..4 {
                for _ in 0..5 {
                    let u: Vec<f64> = models[a]
                        .init_point()
                        .iter()
                        .map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let full_diff = models[a].logp(&u) - models[b].logp(&u);
                    let (pa, pb) = (models[a].pointwise_loglik(&u), models[b].pointwise_loglik(&u));
                    let short: f64 = rows.iter().map(|&r| pa[r] - pb[r]).sum();
                    worst = worst.max((full_diff - short).abs());
                }
            }
        }
        parts.push(('f', worst < 1e-10, format!("max |Δ|={worst:.1e}")));
    }

    // (g) A mixture of one posterior reduces to the single-proposal ratio.
    {
        let target = |x: &[f64]| -0.5 * (x[0] - 0.3).powi(2) * 4.0;
        let proposal = |x: &[f64]| -0.5 * x[0] * x[0];
        let draws = gaussian_draws(1000, &[0.0], &DMatrix::identity(1, 1), 11);
        let mut mix = build_mixture(vec![(0, draws.clone()), (0, draws)], 1000, 12).unwrap();
        mix.set_log_ml(vec![0.7, 0.7]).unwrap();
        let cache = mix.cache_component_loglik(|_, x| proposal(x)).unwrap();
        let den = mix.log_denominators(&cache).unwrap();
        let tl: Vec<f64> = mix.pooled.rows().map(target).collect();
        let mixed = mixture_log_ratios(&tl, &den).unwrap();
        let single: Vec<f64> = mix.pooled.rows().map(|x| target(x) - proposal(x)).collect();
        let offset = mixed[0] - single[0];
        let worst = mixed.iter().zip(&single).map(|(a, b)| (a - b - offset).abs()).fold(0.0, f64::max);
        parts.push(('g', worst < 1e-10, format!("max offset deviation {worst:.1e}")));
    }

    // (h) Gradients of every model.
    {
        let (d, _) = generate_regression_data(50, 5, 13).unwrap();
        let (theta_t, y_t) = generate_training_data(10, 0.01, 14);
        let mut models: Vec<(String, Box<dyn Model>)> = Vec::new();
        for kind in [PriorKind::Standard, PriorKind::Horseshoe] {
            let prior = RegressionPrior::from_observed(&d, kind).unwrap();
            models.push((format!("regression {kind:?}"), Box::new(RegressionModel::new(&d, prior).unwrap())));
        }
        for spec in [SurrogateSpec::logistic(), SurrogateSpec::pce(5)] {
            let t = SurrogateTrainingModel::with_default_prior(spec, theta_t.clone(), y_t.clone()).unwrap();
            let tau = t.init_point();
            models.push((format!("training {:?}", spec.kind), Box::new(t)));
            let i = SurrogateInferenceModel::new(spec, tau, vec![-0.24, -0.25, -0.23, -0.26, -0.245]).unwrap();
            models.push((format!("inference {:?}", spec.kind), Box::new(i)));
        }
        let mut rng = rng_from_seed(15);
        let mut worst = (0.0f64, String::new());
        for (name, m) in &models {
            for _ in 0..20 {
                let u: Vec<f64> = m
                    .init_point()
                    .iter()
                    .map(|v| v + 0.5 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let e = fd_relative_error(m.as_ref(), &u);
                if e > worst.0 {
                    worst = (e, name.clone());
                }
            }
        }
        parts.push(('h', worst.0 < 1e-5, format!("max rel. err {:.1e} ({})", worst.0, worst.1)));
    }

    // (i) Proposal identical to target.
    {
        let cfg = HmcConfig::inference();
        let threshold = k_threshold(cfg.n_draws());
        let tau = SurrogateSpec::logistic().default_prior().0;
        let sur = surrogate_inference_family(SurrogateSpec::logistic(), &vec![tau; 8], &[-0.24, -0.25, -0.23]).unwrap();
        let (full, _) = generate_regression_data(40, 3, 16).unwrap();
        let reg = regression_family(&full, &vec![full.clone(); 5], PriorKind::Standard).unwrap();
        let mut ok = true;
        for fam in [&sur, &reg] {
            let r = twostep::orchestrator::run_single_proposal(fam, &Selector::Random { seed: 17 }, &cfg, &Default::default(), true)
                .unwrap();
            ok &= r.is_complete()
                && r.n_mcmc_runs == 1
                && r.phases.iwmm == EvalCounters::default()
                && r
                    .targets
                    .iter()
                    .filter(|t| t.route != Route::McmcProposal)
                    .all(|t| t.route == Route::Psis && t.k_hat.unwrap() < threshold);
        }
        parts.push(('i', ok, "identical surrogate and regression families".into()));
    }

    let pass = parts.iter().all(|p| p.1);
    let detail = parts
        .iter()
        .map(|(c, ok, msg)| format!("({c}) {} {msg}", if *ok { "ok" } else { "FAILED" }))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

fn criterion_6(costed: &mut Vec<Costed>) -> Outcome {
    let cfg = StudyConfig {
        prior_kind: PriorKind::Horseshoe,
        ..study(Study::Imputation, Method::PsisIwmm, StrategyKind::Medoids, 1)
    };
    let prepared = prepare_study(&cfg).expect("horseshoe study prepares");
    let r = run_prepared(&cfg, &prepared, Method::PsisIwmm).expect("horseshoe psis_iwmm");
    let threshold = r.k_threshold;
    let sound = r.targets.iter().all(|t| match t.route {
        Route::Psis => t.k_hat.unwrap() < threshold,
        Route::Iwmm => t.k_hat_mm.unwrap() < threshold,
        Route::McmcProposal => true,
    });
    let pooled = pool_posterior(&r).map(|p| p.n_draws() == r.m * r.s).unwrap_or(false);
    let summary_ok = summarize(&pool_posterior(&r).unwrap(), &r.param_names).is_ok();
    let routes = r.route_counts();
    let detail = format!(
        "horseshoe imputation: complete={}, n_mcmc_runs={}, routes={routes:?}, route soundness={sound}, pooled rows ok={pooled}",
        r.is_complete(),
        r.n_mcmc_runs
    );
    // Per-run HMC cost is the same for every target, so brute-force
    // counters follow from one run.
    let per_run = r.phases.hmc.n_grad / r.n_mcmc_runs as u64;
    costed.push(Costed {
        label: "horseshoe psis_iwmm".into(),
        baseline: EvalCounters {
            n_grad: per_run * r.m as u64,
            n_logp: r.phases.hmc.n_logp / r.n_mcmc_runs as u64 * r.m as u64,
            n_pointwise_loglik: 0,
        },
        report: r,
    });
    outcome(sound && pooled && summary_ok, detail)
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut costed = Vec::new();
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut run = |n: u32, f: &mut dyn FnMut(&mut Vec<Costed>) -> Outcome, costed: &mut Vec<Costed>| {
        if !wanted(n) {
            return;
        }
        let start = std::time::Instant::now();
        let o = catch_unwind(AssertUnwindSafe(|| f(costed))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {n}: {} ({:.1}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
        results.push((n, o));
    };
    run(5, &mut |_| criterion_5(), &mut costed);
    run(1, &mut criterion_1, &mut costed);
    run(2, &mut criterion_2, &mut costed);
    run(3, &mut criterion_3, &mut costed);
    run(6, &mut criterion_6, &mut costed);
    run(4, &mut |c: &mut Vec<Costed>| criterion_4(c), &mut costed);
    let failed: Vec<u32> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
