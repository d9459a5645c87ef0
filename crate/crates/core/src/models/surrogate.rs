//! Simulator, surrogates, and the two surrogate posteriors: training
//! `p(τ | D_T)` and inference `p(θ_I, σ | τ, D_I)`.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{log_sigmoid_jacobian, sigmoid, softplus, Family, Model, LN_2PI};
use crate::error::{usage, Error, Result};
use crate::rng::rng_from_seed;

pub fn simulator(theta: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * theta).exp()) - 1.0
}

pub fn logistic_surrogate(theta: f64, tau: &[f64]) -> f64 {
    tau[0] * sigmoid(tau[1] * (theta - tau[2])) + tau[3]
}

/// Legendre polynomials `ψ_0..ψ_d` at `theta`.
pub fn legendre_basis(theta: f64, d: usize) -> Result<Vec<f64>> {
    if !(-1.0..=1.0).contains(&theta) {
        return Err(Error::Domain(format!("Legendre basis needs |θ| ≤ 1, got {theta}")));
    }
    Ok(legendre_with_derivative(theta, d).0)
}

/// Values and first derivatives by the three-term recurrences
/// `(n+1) ψ_{n+1} = (2n+1) θ ψ_n - n ψ_{n-1}` and
/// `ψ'_{n+1} = ψ'_{n-1} + (2n+1) ψ_n`.
fn legendre_with_derivative(theta: f64, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; d + 1];
    let mut dp = vec![0.0; d + 1];
    p[0] = 1.0;
    if d >= 1 {
        p[1] = theta;
        dp[1] = 1.0;
    }
    for n in 1..d {
        let nf = n as f64;
        p[n + 1] = ((2.0 * nf + 1.0) * theta * p[n] - nf * p[n - 1]) / (nf + 1.0);
        dp[n + 1] = dp[n - 1] + (2.0 * nf + 1.0) * p[n];
    }
    (p, dp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurrogateKind {
    Logistic,
    Pce { degree: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    /// Observation noise used by the training likelihood.
    pub sigma: f64,
}

impl SurrogateSpec {
    pub fn logistic() -> Self {
        Self {
            kind: SurrogateKind::Logistic,
            sigma: 0.01,
        }
    }

    pub fn pce(degree: usize) -> Self {
        Self {
            kind: SurrogateKind::Pce { degree },
            sigma: 0.01,
        }
    }

    pub fn n_params(&self) -> usize {
        match self.kind {
            SurrogateKind::Logistic => 4,
            SurrogateKind::Pce { degree } => degree + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return usage("surrogate noise sigma must be positive");
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        match self.kind {
            SurrogateKind::Logistic => (1..=4).map(|j| format!("tau{j}")).collect(),
            SurrogateKind::Pce { degree } => (0..=degree).map(|j| format!("tau{j}")).collect(),
        }
    }

    /// Prior means and standard deviations used for training.
    pub fn default_prior(&self) -> (Vec<f64>, Vec<f64>) {
        match self.kind {
            SurrogateKind::Logistic => (vec![2.0, 10.0, 0.0, -1.0], vec![1.0, 10.0, 1.0, 1.0]),
            SurrogateKind::Pce { degree } => (vec![0.0; degree + 1], vec![5.0; degree + 1]),
        }
    }

    pub fn eval(&self, theta: f64, tau: &[f64]) -> f64 {
        match self.kind {
            SurrogateKind::Logistic => logistic_surrogate(theta, tau),
            SurrogateKind::Pce { degree } => {
                let (p, _) = legendre_with_derivative(theta, degree);
                p.iter().zip(tau).map(|(a, b)| a * b).sum()
            }
        }
    }

    /// Value and derivative with respect to `theta`.
    pub fn eval_dtheta(&self, theta: f64, tau: &[f64]) -> (f64, f64) {
        match self.kind {
            SurrogateKind::Logistic => {
                let s = sigmoid(tau[1] * (theta - tau[2]));
                (tau[0] * s + tau[3], tau[0] * s * (1.0 - s) * tau[1])
            }
            SurrogateKind::Pce { degree } => {
                let (p, dp) = legendre_with_derivative(theta, degree);
                (
                    p.iter().zip(tau).map(|(a, b)| a * b).sum(),
                    dp.iter().zip(tau).map(|(a, b)| a * b).sum(),
                )
            }
        }
    }

    /// Value, with the gradient with respect to `tau` written to `out`.
    pub fn eval_dtau(&self, theta: f64, tau: &[f64], out: &mut [f64]) -> f64 {
        match self.kind {
            SurrogateKind::Logistic => {
                let s = sigmoid(tau[1] * (theta - tau[2]));
                let ds = s * (1.0 - s);
                out[0] = s;
                out[1] = tau[0] * ds * (theta - tau[2]);
                out[2] = -tau[0] * ds * tau[1];
                out[3] = 1.0;
                tau[0] * s + tau[3]
            }
            SurrogateKind::Pce { degree } => {
                let (p, _) = legendre_with_derivative(theta, degree);
                out[..=degree].copy_from_slice(&p);
                p.iter().zip(tau).map(|(a, b)| a * b).sum()
            }
        }
    }
}

/// `N_T` equally spaced inputs on `[-1, 1]` with noisy simulator outputs.
pub fn generate_training_data(n_t: usize, sigma: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = rng_from_seed(seed);
    let theta: Vec<f64> = match n_t {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n_t).map(|i| -1.0 + 2.0 * i as f64 / (n_t - 1) as f64).collect(),
    };
    let y = theta
        .iter()
        .map(|&t| simulator(t) + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    (theta, y)
}

/// `N_I` noisy simulator outputs at the fixed input `theta_star`.
pub fn generate_inference_data(n_i: usize, theta_star: f64, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..n_i)
        .map(|_| simulator(theta_star) + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
}

/// Posterior over surrogate parameters `τ` given training data, with fixed
/// noise `spec.sigma` and independent normal priors.
#[derive(Debug, Clone)]
pub struct SurrogateTrainingModel {
    pub spec: SurrogateSpec,
    pub theta_t: Vec<f64>,
    pub y_t: Vec<f64>,
    pub prior_mean: Vec<f64>,
    pub prior_sd: Vec<f64>,
}

impl SurrogateTrainingModel {
    pub fn new(
        spec: SurrogateSpec,
        theta_t: Vec<f64>,
        y_t: Vec<f64>,
        prior_mean: Vec<f64>,
        prior_sd: Vec<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        let k = spec.n_params();
        if theta_t.len() != y_t.len() {
            return usage("training inputs and outputs differ in length");
        }
        if prior_mean.len() != k || prior_sd.len() != k {
            return usage(format!("surrogate prior needs {k} means and sds"));
        }
        if prior_sd.iter().any(|s| !(*s > 0.0)) {
            return usage("prior sds must be positive");
        }
        Ok(Self {
            spec,
            theta_t,
            y_t,
            prior_mean,
            prior_sd,
        })
    }

    pub fn with_default_prior(spec: SurrogateSpec, theta_t: Vec<f64>, y_t: Vec<f64>) -> Result<Self> {
        let (m, s) = spec.default_prior();
        Self::new(spec, theta_t, y_t, m, s)
    }
}

impl Model for SurrogateTrainingModel {
    fn dim(&self) -> usize {
        self.spec.n_params()
    }

    fn param_names(&self) -> Vec<String> {
        self.spec.param_names()
    }

    fn n_obs(&self) -> usize {
        self.y_t.len()
    }

    fn log_prior(&self, u: &[f64]) -> f64 {
        u.iter()
            .zip(self.prior_mean.iter().zip(&self.prior_sd))
            .map(|(x, (m, s))| normal_logpdf(*x, *m, *s))
            .sum()
    }

    fn pointwise_loglik(&self, u: &[f64]) -> Vec<f64> {
        self.theta_t
            .iter()
            .zip(&self.y_t)
            .map(|(&t, &y)| normal_logpdf(y, self.spec.eval(t, u), self.spec.sigma))
            .collect()
    }

    fn logp_grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        let k = u.len();
        let mut lp = 0.0;
        for j in 0..k {
            let (m, s) = (self.prior_mean[j], self.prior_sd[j]);
            lp += normal_logpdf(u[j], m, s);
            grad[j] = -(u[j] - m) / (s * s);
        }
        let var = self.spec.sigma * self.spec.sigma;
        let mut df = vec![0.0; k];
        for (&t, &y) in self.theta_t.iter().zip(&self.y_t) {
            let f = self.spec.eval_dtau(t, u, &mut df);
            lp += normal_logpdf(y, f, self.spec.sigma);
            let r = (y - f) / var;
            for j in 0..k {
                grad[j] += r * df[j];
            }
        }
        lp
    }

    fn constrain(&self, u: &[f64]) -> Vec<f64> {
        u.to_vec()
    }

    fn init_point(&self) -> Vec<f64> {
        self.prior_mean.clone()
    }
}

/// `ln(Φ(2) - Φ(-2))`, the mass of `N(0, 0.5²)` on `[-1, 1]`.
const LN_TRUNC_MASS: f64 = -0.046_567_912_292_390_164;
const THETA_PRIOR_SD: f64 = 0.5;
const SIGMA_UPPER: f64 = 0.05;

/// Posterior over `(θ_I, σ)` for one surrogate parameter draw `τ`.
///
/// `u = (a, b)` with `θ_I = 2 s(a) - 1` and `σ = 0.05 s(b)`, `s` the logistic
/// sigmoid; the prior is `N(0, 0.5²)` truncated to `[-1, 1]` times
/// `Uniform(0, 0.05)`.
#[derive(Debug, Clone)]
pub struct SurrogateInferenceModel {
    pub spec: SurrogateSpec,
    pub tau: Vec<f64>,
    pub y_i: Vec<f64>,
}

impl SurrogateInferenceModel {
    pub fn new(spec: SurrogateSpec, tau: Vec<f64>, y_i: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if tau.len() != spec.n_params() {
            return usage(format!("surrogate needs {} parameters, got {}", spec.n_params(), tau.len()));
        }
        if y_i.is_empty() {
            return usage("inference data must be nonempty");
        }
        if matches!(spec.kind, SurrogateKind::Logistic) && tau[1] == 0.0 {
            return usage("logistic surrogate needs a nonzero slope");
        }
        Ok(Self { spec, tau, y_i })
    }

    fn theta(a: f64) -> f64 {
        2.0 * sigmoid(a) - 1.0
    }

    fn ln_sigma(b: f64) -> f64 {
        SIGMA_UPPER.ln() - softplus(-b)
    }

    /// Log likelihood of `D_I` at constrained `(θ, σ)`.
    pub fn loglik_at(&self, theta: f64, sigma: f64) -> f64 {
        let f = self.spec.eval(theta, &self.tau);
        self.y_i.iter().map(|&y| normal_logpdf(y, f, sigma)).sum()
    }
}

impl Model for SurrogateInferenceModel {
    fn dim(&self) -> usize {
        2
    }

    fn param_names(&self) -> Vec<String> {
        vec!["theta_I".into(), "sigma".into()]
    }

    fn n_obs(&self) -> usize {
        self.y_i.len()
    }

    fn log_prior(&self, u: &[f64]) -> f64 {
        let theta = Self::theta(u[0]);
        let z = theta / THETA_PRIOR_SD;
        // Uniform density on σ cancels the ln 0.05 of its Jacobian.
        -0.5 * LN_2PI - THETA_PRIOR_SD.ln() - LN_TRUNC_MASS - 0.5 * z * z
            + std::f64::consts::LN_2
            + log_sigmoid_jacobian(u[0])
            + log_sigmoid_jacobian(u[1])
    }

    fn pointwise_loglik(&self, u: &[f64]) -> Vec<f64> {
        let f = self.spec.eval(Self::theta(u[0]), &self.tau);
        let ln_s = Self::ln_sigma(u[1]);
        let s = ln_s.exp();
        self.y_i
            .iter()
            .map(|&y| {
                let z = (y - f) / s;
                -0.5 * LN_2PI - ln_s - 0.5 * z * z
            })
            .collect()
    }

    fn logp_grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        let sa = sigmoid(u[0]);
        let sb = sigmoid(u[1]);
        let theta = 2.0 * sa - 1.0;
        let dtheta_da = 2.0 * sa * (1.0 - sa);
        let ln_s = Self::ln_sigma(u[1]);
        let s = ln_s.exp();
        let dsigma_db_over_sigma = 1.0 - sb;

        let lp_prior = self.log_prior(u);
        let mut ga = -theta / (THETA_PRIOR_SD * THETA_PRIOR_SD) * dtheta_da + (1.0 - 2.0 * sa);
        let mut gb = 1.0 - 2.0 * sb;

        let (f, df) = self.spec.eval_dtheta(theta, &self.tau);
        let mut ll = 0.0;
        let mut sum_r2 = 0.0;
        let mut sum_r = 0.0;
        for &y in &self.y_i {
            let r = y - f;
            let z = r / s;
            ll += -0.5 * LN_2PI - ln_s - 0.5 * z * z;
            sum_r += r;
            sum_r2 += z * z;
        }
        let n = self.y_i.len() as f64;
        ga += sum_r / (s * s) * df * dtheta_da;
        // d/dσ · dσ/db = (-n/σ + Σr²/σ³) · σ (1 - s(b))
        gb += (-n + sum_r2) * dsigma_db_over_sigma;
        grad[0] = ga;
        grad[1] = gb;
        lp_prior + ll
    }

    fn constrain(&self, u: &[f64]) -> Vec<f64> {
        vec![Self::theta(u[0]), Self::ln_sigma(u[1]).exp()]
    }

    fn init_point(&self) -> Vec<f64> {
        vec![0.0, 0.0]
    }
}

/// One inference target per surrogate parameter draw.
pub fn surrogate_inference_family(spec: SurrogateSpec, taus: &[Vec<f64>], y_i: &[f64]) -> Result<Family> {
    let members = taus
        .iter()
        .map(|t| Ok(Arc::new(SurrogateInferenceModel::new(spec, t.clone(), y_i.to_vec())?) as Arc<dyn Model>))
        .collect::<Result<Vec<_>>>()?;
    let name = match spec.kind {
        SurrogateKind::Logistic => "surrogate_logistic",
        SurrogateKind::Pce { .. } => "surrogate_pce",
    };
    Ok(Family::new(name, members))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::test_support::{check_decomposition, check_gradient};
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn simulator_values() {
        assert_eq!(simulator(0.0), 0.0);
        assert!((simulator(10.0) - 1.0).abs() < 1e-8);
        assert_abs_diff_eq!(simulator(-0.05), -0.244_918_662_4, epsilon = 1e-9);
    }

    #[test]
    fn logistic_surrogate_values() {
        let tau = [2.0, 10.0, 0.0, -1.0];
        for i in 0..20 {
            let t = -1.0 + 2.0 * i as f64 / 19.0;
            assert_abs_diff_eq!(logistic_surrogate(t, &tau), simulator(t), epsilon = 1e-12);
        }
        assert_eq!(logistic_surrogate(0.3, &[0.0, 1.0, 0.0, 4.2]), 4.2);
        assert_abs_diff_eq!(logistic_surrogate(0.7, &[3.0, 5.0, 0.7, 1.0]), 2.5, epsilon = 1e-15);
    }

    /// Closed-form Legendre polynomials up to degree 5.
    fn legendre_closed(t: f64) -> [f64; 6] {
        [
            1.0,
            t,
            (3.0 * t * t - 1.0) / 2.0,
            (5.0 * t.powi(3) - 3.0 * t) / 2.0,
            (35.0 * t.powi(4) - 30.0 * t * t + 3.0) / 8.0,
            (63.0 * t.powi(5) - 70.0 * t.powi(3) + 15.0 * t) / 8.0,
        ]
    }

    #[test]
    fn legendre_values() {
        assert!(legendre_basis(1.0, 5).unwrap().iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert_abs_diff_eq!(legendre_basis(0.5, 2).unwrap()[2], -0.125, epsilon = 1e-15);
        assert_eq!(legendre_basis(0.0, 3).unwrap()[3], 0.0);
        assert!(matches!(legendre_basis(1.5, 2), Err(Error::Domain(_))));
        assert_eq!(legendre_basis(0.2, 0).unwrap(), vec![1.0]);
        for i in 0..41 {
            let t = -1.0 + i as f64 * 0.05;
            let closed = legendre_closed(t);
            let rec = legendre_basis(t, 5).unwrap();
            for k in 0..6 {
                assert_abs_diff_eq!(rec[k], closed[k], epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn pce_least_squares_error_against_simulator() {
        // Noise-free degree-5 least squares on the 10-point training grid.
        let grid: Vec<f64> = (0..10).map(|i| -1.0 + 2.0 * i as f64 / 9.0).collect();
        let a = DMatrix::from_fn(10, 6, |r, c| legendre_closed(grid[r])[c]);
        let b = DVector::from_iterator(10, grid.iter().map(|&t| simulator(t)));
        let coef = a.svd(true, true).solve(&b, 1e-14).unwrap();
        let spec = SurrogateSpec::pce(5);
        let tau: Vec<f64> = coef.iter().copied().collect();
        assert_abs_diff_eq!(tau[1], 1.41992, epsilon = 1e-4);
        assert_abs_diff_eq!(tau[3], -0.78515, epsilon = 1e-4);
        let max_err = (0..=20_000)
            .map(|i| {
                let t = -1.0 + i as f64 / 10_000.0;
                (spec.eval(t, &tau) - simulator(t)).abs()
            })
            .fold(0.0, f64::max);
        // Degree 5 cannot resolve the slope-10 logistic; the error is
        // dominated by the region around θ ≈ ±0.15.
        assert_abs_diff_eq!(max_err, 0.15704, epsilon = 1e-3);
        assert_abs_diff_eq!(spec.eval(-0.05, &tau), -0.16456, epsilon = 1e-4);
    }

    #[test]
    fn surrogate_derivatives() {
        for spec in [SurrogateSpec::logistic(), SurrogateSpec::pce(5)] {
            let tau: Vec<f64> = match spec.kind {
                SurrogateKind::Logistic => vec![1.8, 9.0, 0.05, -0.9],
                SurrogateKind::Pce { .. } => vec![0.1, 1.4, -0.2, -0.8, 0.05, 0.4],
            };
            for &t in &[-0.9, -0.3, 0.0, 0.45, 0.8] {
                let h = 1e-6;
                let (_, d) = spec.eval_dtheta(t, &tau);
                let fd = (spec.eval(t + h, &tau) - spec.eval(t - h, &tau)) / (2.0 * h);
                assert!((d - fd).abs() < 1e-6 * d.abs().max(1.0));
                let mut g = vec![0.0; tau.len()];
                spec.eval_dtau(t, &tau, &mut g);
                for j in 0..tau.len() {
                    let mut a = tau.clone();
                    let mut b = tau.clone();
                    a[j] += h;
                    b[j] -= h;
                    let fd = (spec.eval(t, &a) - spec.eval(t, &b)) / (2.0 * h);
                    assert!((g[j] - fd).abs() < 1e-6 * g[j].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn training_model_gradients_and_decomposition() {
        let (theta, y) = generate_training_data(10, 0.01, 3);
        assert_eq!(theta.len(), 10);
        assert_eq!(theta[0], -1.0);
        assert_eq!(theta[9], 1.0);
        for spec in [SurrogateSpec::logistic(), SurrogateSpec::pce(5)] {
            let m = SurrogateTrainingModel::with_default_prior(spec, theta.clone(), y.clone()).unwrap();
            check_gradient(&m, 20, 0.3, 4);
            check_decomposition(&m, 20, 0.3, 5);
        }
    }

    #[test]
    fn training_without_data_is_the_prior() {
        let m = SurrogateTrainingModel::with_default_prior(SurrogateSpec::logistic(), vec![], vec![]).unwrap();
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [0.0, -1.0, 0.5, 2.0];
        assert_abs_diff_eq!(m.logp(&a) - m.logp(&b), m.log_prior(&a) - m.log_prior(&b), epsilon = 1e-12);
        assert!(m.pointwise_loglik(&a).is_empty());
    }

    #[test]
    fn inference_model_gradients_and_decomposition() {
        let y = generate_inference_data(5, -0.05, 0.01, 6);
        for (spec, tau) in [
            (SurrogateSpec::logistic(), vec![2.1, 9.5, 0.02, -1.05]),
            (SurrogateSpec::pce(5), vec![0.0, 1.42, 0.0, -0.785, 0.0, 0.377]),
        ] {
            let m = SurrogateInferenceModel::new(spec, tau, y.clone()).unwrap();
            check_gradient(&m, 20, 2.0, 7);
            check_decomposition(&m, 20, 2.0, 8);
        }
    }

    #[test]
    fn perfect_fit_likelihood() {
        let spec = SurrogateSpec::logistic();
        let tau = vec![2.0, 10.0, 0.0, -1.0];
        let y = vec![simulator(-0.05); 5];
        let m = SurrogateInferenceModel::new(spec, tau, y).unwrap();
        let sigma: f64 = 0.01;
        let expected = 5.0 * (-0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln());
        assert_abs_diff_eq!(m.loglik_at(-0.05, sigma), expected, epsilon = 1e-10);
    }

    #[test]
    fn inference_prior_integrates_to_one() {
        // Trapezoid integral of exp(log_prior) over the unconstrained plane.
        let m = SurrogateInferenceModel::new(SurrogateSpec::logistic(), vec![2.0, 10.0, 0.0, -1.0], vec![0.0]).unwrap();
        let h = 0.02;
        let mut total = 0.0;
        for i in -1500..=1500 {
            for j in -1500..=1500 {
                total += m.log_prior(&[i as f64 * h, j as f64 * h]).exp();
            }
        }
        assert!((total * h * h - 1.0).abs() < 1e-4, "{}", total * h * h);
    }

    #[test]
    fn constructor_errors() {
        assert!(SurrogateInferenceModel::new(SurrogateSpec::logistic(), vec![1.0, 0.0, 0.0, 0.0], vec![0.0]).is_err());
        assert!(SurrogateInferenceModel::new(SurrogateSpec::logistic(), vec![1.0; 3], vec![0.0]).is_err());
        assert!(SurrogateInferenceModel::new(SurrogateSpec::logistic(), vec![1.0; 4], vec![]).is_err());
        let bad = SurrogateSpec {
            kind: SurrogateKind::Logistic,
            sigma: 0.0,
        };
        assert!(SurrogateTrainingModel::with_default_prior(bad, vec![], vec![]).is_err());
    }
}
