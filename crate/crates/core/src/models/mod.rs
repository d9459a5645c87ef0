//! Target densities.
//!
//! Every model is parameterized on an unconstrained space `u ∈ R^d`. The log
//! prior includes the log Jacobian of the constraining transform, so
//! `logp(u) = Σ_n pointwise_loglik(u)_n + log_prior(u)` is the density that
//! HMC and importance sampling operate on. [`Model::constrain`] maps `u` to
//! the reported parameters.

pub mod regression;
pub mod surrogate;

use std::sync::Arc;

pub use regression::{generate_regression_data, PriorKind, RegressionModel, RegressionPrior};
pub use surrogate::{
    legendre_basis, logistic_surrogate, simulator, SurrogateInferenceModel, SurrogateKind, SurrogateSpec,
    SurrogateTrainingModel,
};

pub trait Model: Send + Sync {
    /// Unconstrained dimension.
    fn dim(&self) -> usize;
    /// Names of the constrained outputs of [`Model::constrain`].
    fn param_names(&self) -> Vec<String>;
    fn n_obs(&self) -> usize;
    fn log_prior(&self, u: &[f64]) -> f64;
    fn pointwise_loglik(&self, u: &[f64]) -> Vec<f64>;
    /// Sum of the pointwise terms over `rows` only.
    fn loglik_rows(&self, u: &[f64], rows: &[usize]) -> f64 {
        let pw = self.pointwise_loglik(u);
        rows.iter().map(|&r| pw[r]).sum()
    }
    fn loglik(&self, u: &[f64]) -> f64 {
        self.pointwise_loglik(u).iter().sum()
    }
    fn logp(&self, u: &[f64]) -> f64 {
        let lp = self.log_prior(u);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        lp + self.loglik(u)
    }
    /// Returns `logp(u)` and writes its gradient into `grad`.
    fn logp_grad(&self, u: &[f64], grad: &mut [f64]) -> f64;
    fn constrain(&self, u: &[f64]) -> Vec<f64>;
    /// A reasonable starting point on the unconstrained scale.
    fn init_point(&self) -> Vec<f64>;
}

/// An indexed family of targets `p(θ | τ⁽ⁱ⁾)` sharing one parameter space
/// and one prior.
#[derive(Clone)]
pub struct Family {
    pub name: String,
    pub members: Vec<Arc<dyn Model>>,
    /// Rows whose likelihood terms can differ between members. When set,
    /// log ratios between members only need these rows.
    pub diff_rows: Option<Vec<usize>>,
}

impl std::fmt::Debug for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Family")
            .field("name", &self.name)
            .field("len", &self.members.len())
            .field("diff_rows", &self.diff_rows)
            .finish()
    }
}

impl Family {
    pub fn new(name: impl Into<String>, members: Vec<Arc<dyn Model>>) -> Self {
        Self {
            name: name.into(),
            members,
            diff_rows: None,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member(&self, i: usize) -> &dyn Model {
        self.members[i].as_ref()
    }

    pub fn dim(&self) -> usize {
        self.members.first().map_or(0, |m| m.dim())
    }

    pub fn param_names(&self) -> Vec<String> {
        self.members.first().map_or_else(Vec::new, |m| m.param_names())
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln s(x) + ln(1 - s(x))` for the logistic sigmoid `s`.
pub(crate) fn log_sigmoid_jacobian(x: f64) -> f64 {
    -softplus(-x) - softplus(x)
}

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;
