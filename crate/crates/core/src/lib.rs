//! Truncated Dirichlet-process mixtures of B-spline regressions, fit by
//! mean-field variational Bayes, with bootstrap cluster-stability analysis.
//!
//! The library fits a stick-breaking mixture over per-gene time courses and
//! quantifies how stable the resulting clustering is under resampling. Three
//! bootstrap estimators are provided: cold starts (fresh multi-restart fits
//! per replicate), warm starts (refits initialized at the base optimum), and
//! a linear bootstrap that maps resampling weights straight to parameter
//! perturbations through the weight-sensitivity matrix `S = -H^{-1} C`,
//! where `H` and `C` are exact second derivatives of the weighted KL
//! objective.
//!
//! See the `examples/` directory for one runnable example per capability and
//! the `stickboot` binary for the pipeline commands.

pub mod error;
pub(crate) mod linalg;
pub mod scalar;
pub mod spline;
pub mod model;
pub mod derivatives;
pub mod optimizer;
pub mod sensitivity;

pub use error::{Error, Result};
