//! Mixture proposals built from several component posteriors.
//!
//! For a uniform mixture of posteriors `p(θ|τ_j)`, the ratio for target `i`
//! is, up to a constant,
//!
//! ```text
//! log r_i(θ) = ℓ_i(θ) - log Σ_j exp(ℓ_j(θ) - log Z_j)
//! ```
//!
//! where `ℓ_j` is the log likelihood of realization `j` and `Z_j` its
//! normalizing constant. The priors cancel; the `Z_j` do not, so they are
//! estimated by bridge sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{usage, Error, Result};
use crate::rng::rng_from_seed;
use crate::sampling::{log_sum_exp, DrawMatrix};

pub const BRIDGE_TOL: f64 = 1e-8;
pub const BRIDGE_MAX_ITER: usize = 1000;

#[derive(Debug, Clone)]
pub struct MixtureProposal {
    pub component_indices: Vec<usize>,
    pub component_draws: Vec<DrawMatrix>,
    pub log_ml: Option<Vec<f64>>,
    pub pooled: DrawMatrix,
}

impl MixtureProposal {
    pub fn len(&self) -> usize {
        self.component_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.component_indices.is_empty()
    }

    pub fn set_log_ml(&mut self, log_ml: Vec<f64>) -> Result<()> {
        if log_ml.len() != self.len() {
            return usage("one log marginal likelihood per component required");
        }
        if log_ml.iter().any(|v| !v.is_finite()) {
            return usage("log marginal likelihoods must be finite");
        }
        self.log_ml = Some(log_ml);
        Ok(())
    }

    /// Evaluates every component's log likelihood once at every pooled draw.
    /// `loglik(j, θ)` receives the position `j` within `component_indices`.
    pub fn cache_component_loglik(
        &self,
        mut loglik: impl FnMut(usize, &[f64]) -> f64,
    ) -> Result<ComponentLoglik> {
        let mut values = Vec::with_capacity(self.len());
        for j in 0..self.len() {
            let col: Vec<f64> = self
                .pooled
                .rows()
                .enumerate()
                .map(|(s, r)| {
                    let v = loglik(j, r);
                    if v.is_nan() {
                        Err(Error::Evaluation { index: s })
                    } else {
                        Ok(v)
                    }
                })
                .collect::<Result<_>>()?;
            values.push(col);
        }
        Ok(ComponentLoglik { values })
    }

    /// `log Σ_j exp(ℓ_j(θ_s) - log Z_j)` for every pooled draw.
    pub fn log_denominators(&self, cache: &ComponentLoglik) -> Result<Vec<f64>> {
        let Some(log_ml) = &self.log_ml else {
            return usage("mixture log marginal likelihoods are not set");
        };
        if cache.values.len() != self.len() {
            return usage("component cache does not match the mixture");
        }
        let mut terms = vec![0.0; self.len()];
        (0..self.pooled.n_draws())
            .map(|s| {
                for (j, t) in terms.iter_mut().enumerate() {
                    *t = cache.values[j][s] - log_ml[j];
                }
                log_sum_exp(&terms)
            })
            .collect()
    }
}

/// Component log likelihoods at the pooled draws, shared by all targets.
#[derive(Debug, Clone)]
pub struct ComponentLoglik {
    pub values: Vec<Vec<f64>>,
}

impl ComponentLoglik {
    pub fn n_evals(&self) -> u64 {
        self.values.iter().map(|v| v.len() as u64).sum()
    }
}

/// Pools component draws and resamples `s_out` rows uniformly with
/// replacement.
pub fn build_mixture(components: Vec<(usize, DrawMatrix)>, s_out: usize, seed: u64) -> Result<MixtureProposal> {
    if components.len() < 2 {
        return usage("a mixture needs at least two components");
    }
    build_mixture_unchecked(components, s_out, seed)
}

pub(crate) fn build_mixture_unchecked(
    components: Vec<(usize, DrawMatrix)>,
    s_out: usize,
    seed: u64,
) -> Result<MixtureProposal> {
    if s_out == 0 {
        return usage("s_out must be at least 1");
    }
    let (component_indices, component_draws): (Vec<_>, Vec<_>) = components.into_iter().unzip();
    let refs: Vec<&DrawMatrix> = component_draws.iter().collect();
    let all = DrawMatrix::vstack(&refs)?;
    let mut rng = rng_from_seed(seed);
    let idx: Vec<usize> = (0..s_out).map(|_| rng.gen_range(0..all.n_draws())).collect();
    let pooled = all.select_rows(&idx)?;
    Ok(MixtureProposal {
        component_indices,
        component_draws,
        log_ml: None,
        pooled,
    })
}

/// Log ratios for one target given its log likelihood at the pooled draws.
pub fn mixture_log_ratios(target_loglik: &[f64], log_denominators: &[f64]) -> Result<Vec<f64>> {
    if target_loglik.len() != log_denominators.len() {
        return usage("target log likelihoods and mixture denominators differ in length");
    }
    Ok(target_loglik
        .iter()
        .zip(log_denominators)
        .map(|(l, d)| l - d)
        .collect())
}

#[derive(Debug, Clone, Copy)]
pub struct BridgeEstimate {
    pub log_ml: f64,
    pub iterations: usize,
    /// Density evaluations (posterior draws plus auxiliary draws).
    pub n_evals: u64,
}

struct Gaussian {
    mean: DVector<f64>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
}

impl Gaussian {
    fn fit(draws: &DrawMatrix) -> Result<Self> {
        let d = draws.dim();
        let n = draws.n_draws();
        if n < d + 1 {
            return Err(Error::DegenerateGeometry("too few draws to fit moments".into()));
        }
        let mean = DVector::from_vec(draws.column_means());
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for r in draws.rows() {
            let c = DVector::from_iterator(d, r.iter().zip(mean.iter()).map(|(a, b)| a - b));
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= (n - 1) as f64;
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::DegenerateGeometry("draw covariance is singular".into()))?;
        let chol_l = chol.l();
        let log_det: f64 = 2.0 * (0..d).map(|j| chol_l[(j, j)].ln()).sum::<f64>();
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Self { mean, chol_l, log_norm })
    }

    fn logpdf(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let diff = DVector::from_iterator(d, x.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        let z = self
            .chol_l
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * z.norm_squared()
    }

    fn sample(&self, rng: &mut impl rand::Rng) -> Vec<f64> {
        let d = self.mean.len();
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        (&self.chol_l * z + &self.mean).iter().copied().collect()
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Iterative bridge-sampling estimate of `log ∫ exp(unnorm_logp)`.
///
/// The auxiliary density is a Gaussian matched to the first two moments of
/// `draws`.
pub fn bridge_log_ml(
    unnorm_logp: &mut dyn FnMut(&[f64]) -> f64,
    draws: &DrawMatrix,
    n_aux: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<BridgeEstimate> {
    if n_aux == 0 {
        return usage("n_aux must be positive");
    }
    let aux = Gaussian::fit(draws)?;
    let mut rng = rng_from_seed(seed);
    let eval = |f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], idx: usize| -> Result<f64> {
        let v = f(x);
        if v.is_nan() {
            Err(Error::Evaluation { index: idx })
        } else {
            Ok(v)
        }
    };
    let l_post: Vec<f64> = draws
        .rows()
        .enumerate()
        .map(|(s, r)| Ok(eval(unnorm_logp, r, s)? - aux.logpdf(r)))
        .collect::<Result<_>>()?;
    let l_aux: Vec<f64> = (0..n_aux)
        .map(|s| {
            let x = aux.sample(&mut rng);
            Ok(eval(unnorm_logp, &x, draws.n_draws() + s)? - aux.logpdf(&x))
        })
        .collect::<Result<_>>()?;

    let n1 = l_post.len() as f64;
    let n2 = n_aux as f64;
    let s1 = n1 / (n1 + n2);
    let s2 = n2 / (n1 + n2);
    let shift = median(&l_post);
    let e_post: Vec<f64> = l_post.iter().map(|l| (l - shift).exp()).collect();
    let e_aux: Vec<f64> = l_aux.iter().map(|l| (l - shift).exp()).collect();

    let mut r = 1.0f64;
    for it in 1..=max_iter {
        let num = e_aux.iter().map(|e| e / (s1 * e + s2 * r)).sum::<f64>() / n2;
        let den = e_post.iter().map(|e| 1.0 / (s1 * e + s2 * r)).sum::<f64>() / n1;
        let next = num / den;
        if !next.is_finite() || next <= 0.0 {
            return Err(Error::Convergence {
                iterations: it,
                last: r.ln() + shift,
            });
        }
        let rel = ((next - r) / next).abs();
        r = next;
        if rel < tol {
            return Ok(BridgeEstimate {
                log_ml: r.ln() + shift,
                iterations: it,
                n_evals: (draws.n_draws() + n_aux) as u64,
            });
        }
    }
    Err(Error::Convergence {
        iterations: max_iter,
        last: r.ln() + shift,
    })
}
