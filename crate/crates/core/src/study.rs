//! Study drivers: build a target family and a selector from a
//! configuration, then propagate.

use std::path::PathBuf;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::hmc::{hmc_sample, HmcConfig};
use crate::imputation::{chained_impute, inject_missingness, Dataset, ImputationManifest, DEFAULT_SWEEPS};
use crate::models::regression::regression_family;
use crate::models::surrogate::{generate_inference_data, generate_training_data, surrogate_inference_family};
use crate::models::{generate_regression_data, Family, PriorKind, SurrogateSpec, SurrogateTrainingModel};
use crate::orchestrator::{propagate, Limits, Method, PropagationReport};
use crate::rng::derive_seed;
use crate::selection::{dissimilarity_matrix, mean_prior_loglik, Selector, StrategyKind, DEFAULT_PRIOR_DRAWS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Imputation,
    SurrogateLogistic,
    SurrogatePce,
    /// Externally imputed datasets listed in a manifest.
    CustomCsv,
}

impl Study {
    fn is_surrogate(self) -> bool {
        matches!(self, Study::SurrogateLogistic | Study::SurrogatePce)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub study: Study,
    pub method: Method,
    pub strategy: StrategyKind,
    /// Number of first-step realizations.
    pub m: usize,
    /// Seed for data generation, imputation and selection.
    pub seed: u64,
    pub prior_kind: PriorKind,
    /// Fraction of rows with missing values.
    pub pi: f64,
    /// Rows of the regression data.
    pub n: usize,
    /// Covariates of the regression data.
    pub p: usize,
    pub n_mix: usize,
    /// Prior draws for log-likelihood quantile selection.
    pub n_prior_draws: usize,
    pub pce_degree: usize,
    pub n_train: usize,
    pub n_inference: usize,
    pub theta_star: f64,
    /// Second-step sampler; `S = n_chains · n_sampling`.
    pub hmc: HmcConfig,
    /// Sampler for the surrogate parameters; its draw count is set to `m`.
    pub training_hmc: HmcConfig,
    pub limits: Limits,
    /// Manifest for `custom_csv`.
    pub manifest: Option<PathBuf>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            study: Study::Imputation,
            method: Method::PsisIwmm,
            strategy: StrategyKind::Random,
            m: 100,
            seed: 1,
            prior_kind: PriorKind::Standard,
            pi: 0.15,
            n: 100,
            p: 10,
            n_mix: 5,
            n_prior_draws: DEFAULT_PRIOR_DRAWS,
            pce_degree: 5,
            n_train: 10,
            n_inference: 5,
            theta_star: -0.05,
            hmc: HmcConfig::inference(),
            training_hmc: HmcConfig::surrogate_training(),
            limits: Limits::default(),
            manifest: None,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.hmc.validate()?;
        if self.m == 0 {
            return usage("m must be at least 1");
        }
        if self.method == Method::PsisMixture && (self.n_mix < 2 || self.m <= self.n_mix) {
            return usage(format!("psis_mixture needs m > n_mix ≥ 2 (m = {}, n_mix = {})", self.m, self.n_mix));
        }
        if self.strategy == StrategyKind::LoglikQuantile && !self.study.is_surrogate() {
            return usage("loglik_quantile selection applies to surrogate studies only");
        }
        if self.strategy == StrategyKind::Mean && self.method == Method::PsisMixture {
            return usage("the mean strategy selects one proposal and cannot drive psis_mixture");
        }
        if self.study == Study::CustomCsv && self.manifest.is_none() {
            return usage("custom_csv needs a manifest");
        }
        if self.study == Study::Imputation && !(self.pi > 0.0 && self.pi < 1.0) {
            return usage("pi must lie in (0, 1)");
        }
        if self.study.is_surrogate() {
            self.training_hmc.validate()?;
            if self.n_inference == 0 {
                return usage("n_inference must be at least 1");
            }
            if !(-1.0..=1.0).contains(&self.theta_star) {
                return usage("theta_star must lie in [-1, 1]");
            }
        }
        if self.strategy == StrategyKind::LoglikQuantile && self.n_prior_draws == 0 {
            return usage("n_prior_draws must be at least 1");
        }
        Ok(())
    }

    pub fn surrogate_spec(&self) -> Option<SurrogateSpec> {
        match self.study {
            Study::SurrogateLogistic => Some(SurrogateSpec::logistic()),
            Study::SurrogatePce => Some(SurrogateSpec::pce(self.pce_degree)),
            _ => None,
        }
    }
}

/// First-step realizations in the form each study needs.
#[derive(Debug, Clone)]
pub enum Realizations {
    Imputed { observed: Dataset, datasets: Vec<Dataset> },
    Surrogate { spec: SurrogateSpec, taus: Vec<Vec<f64>>, y_i: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct PreparedStudy {
    pub family: Family,
    pub selector: Selector,
    pub realizations: Realizations,
}

/// The first step of the regression study: data, mask and imputations.
pub fn imputation_first_step(cfg: &StudyConfig) -> Result<(Dataset, Vec<Dataset>)> {
    match cfg.study {
        Study::Imputation => {
            let (full, _) = generate_regression_data(cfg.n, cfg.p, derive_seed(cfg.seed, "data", 0))?;
            let observed = inject_missingness(&full, cfg.pi, derive_seed(cfg.seed, "mask", 0))?;
            let datasets = chained_impute(&observed, cfg.m, DEFAULT_SWEEPS, derive_seed(cfg.seed, "imputer", 0))?;
            Ok((observed, datasets))
        }
        Study::CustomCsv => {
            let path = cfg.manifest.as_ref().expect("validated");
            let manifest = ImputationManifest::read(path)?;
            let base = path.parent().map(PathBuf::from).unwrap_or_default();
            let datasets = manifest.load(&base)?;
            let Some(first) = datasets.first() else {
                return usage("the manifest lists no datasets");
            };
            Ok((first.masked(), datasets))
        }
        _ => usage("not an imputation study"),
    }
}

/// The first step of a surrogate study: `m` surrogate parameter draws from
/// their training posterior, plus the inference data.
pub fn surrogate_first_step(cfg: &StudyConfig, spec: SurrogateSpec) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (theta_t, y_t) = generate_training_data(cfg.n_train, spec.sigma, derive_seed(cfg.seed, "training-data", 0));
    let training = SurrogateTrainingModel::with_default_prior(spec, theta_t, y_t)?;
    let mut hmc = cfg.training_hmc.clone();
    hmc.n_sampling = cfg.m.div_ceil(hmc.n_chains);
    let out = hmc_sample(&training, &hmc, 0)?;
    let taus: Vec<Vec<f64>> = out.draws.rows().take(cfg.m).map(<[f64]>::to_vec).collect();
    let y_i = generate_inference_data(cfg.n_inference, cfg.theta_star, spec.sigma, derive_seed(cfg.seed, "inference-data", 0));
    Ok((taus, y_i))
}

fn euclidean_matrix(points: &[Vec<f64>]) -> DMatrix<f64> {
    let m = points.len();
    DMatrix::from_fn(m, m, |i, j| {
        points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    })
}

fn build_selector(cfg: &StudyConfig, r: &Realizations) -> Result<Selector> {
    let seed = derive_seed(cfg.seed, "select", 0);
    Ok(match cfg.strategy {
        StrategyKind::Random => Selector::Random { seed },
        StrategyKind::MaxKhat => Selector::MaxKhat { seed },
        StrategyKind::Medoids => Selector::Medoids {
            dist: match r {
                Realizations::Imputed { observed, datasets } => {
                    dissimilarity_matrix(datasets, Some(&observed.missing_rows()))?
                }
                Realizations::Surrogate { taus, .. } => euclidean_matrix(taus),
            },
        },
        StrategyKind::LoglikQuantile => match r {
            Realizations::Surrogate { spec, taus, y_i } => Selector::LoglikQuantile {
                scores: mean_prior_loglik(taus, y_i, spec, cfg.n_prior_draws, derive_seed(cfg.seed, "prior-draws", 0))?,
            },
            Realizations::Imputed { .. } => return usage("loglik_quantile selection applies to surrogate studies only"),
        },
        StrategyKind::Mean => Selector::Mean {
            points: match r {
                Realizations::Imputed { observed, datasets } => {
                    let rows = observed.missing_rows();
                    datasets
                        .iter()
                        .map(|d| rows.iter().flat_map(|&i| d.row(i).to_vec()).collect())
                        .collect()
                }
                Realizations::Surrogate { taus, .. } => taus.clone(),
            },
        },
    })
}

pub fn prepare_study(cfg: &StudyConfig) -> Result<PreparedStudy> {
    cfg.validate()?;
    let (family, realizations) = match cfg.surrogate_spec() {
        Some(spec) => {
            let (taus, y_i) = surrogate_first_step(cfg, spec)?;
            let family = surrogate_inference_family(spec, &taus, &y_i)?;
            (family, Realizations::Surrogate { spec, taus, y_i })
        }
        None => {
            let (observed, datasets) = imputation_first_step(cfg)?;
            let family = regression_family(&observed, &datasets, cfg.prior_kind)?;
            (family, Realizations::Imputed { observed, datasets })
        }
    };
    let selector = build_selector(cfg, &realizations)?;
    Ok(PreparedStudy {
        family,
        selector,
        realizations,
    })
}

pub fn run_prepared(cfg: &StudyConfig, prepared: &PreparedStudy, method: Method) -> Result<PropagationReport> {
    propagate(&prepared.family, method, &prepared.selector, cfg.n_mix, &cfg.hmc, &cfg.limits)
}

pub fn run_study(cfg: &StudyConfig) -> Result<PropagationReport> {
    let prepared = prepare_study(cfg)?;
    run_prepared(cfg, &prepared, cfg.method)
}
