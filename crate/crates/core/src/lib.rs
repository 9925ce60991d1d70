//! Bayesian calibration of expensive computer models, fit by stochastic
//! variational inference over a truncated vine-copula decomposition of the
//! joint Gaussian-process likelihood.
//!
//! The likelihood couples field observations with simulator runs through a
//! shared emulator GP plus a discrepancy GP. Exact inference needs the full
//! n x n covariance at every step; the vine decomposition rewrites the joint
//! log-density as a sum over conditioned pairs, and truncating the vine at
//! level `l` yields unbiased single-pair stochastic gradients whose cost is
//! independent of n. A random-walk Metropolis sampler over the same posterior
//! serves as the reference answer, and [`predict`] turns either posterior
//! into held-out predictions.
//!
//! Modules follow the pipeline: [`data`] (datasets and CSV), [`model`]
//! (GP specification and joint moments), [`vine`] (pair terms and the
//! truncation bookkeeping), [`variational`] (mean-field families, scores,
//! priors), [`optimizer`] (gradient estimators and the AdaGrad loop),
//! [`mh`] (reference sampler), [`predict`], and the study harness
//! ([`design`], [`sim`], [`ldm`]).

pub mod data;
pub mod design;
pub mod error;
pub mod ldm;
pub mod linalg;
pub mod mh;
pub mod model;
pub mod optimizer;
pub mod predict;
pub mod sim;
pub mod special;
pub mod variational;
pub mod vine;

pub use error::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
