// Negated float comparisons are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod hmc;
pub mod imputation;
pub mod iwmm;
pub mod mixture;
pub mod models;
pub mod orchestrator;
pub mod psis;
pub mod rng;
pub mod sampling;
pub mod selection;
pub mod study;
pub mod summary;

pub use error::{Error, Result};
