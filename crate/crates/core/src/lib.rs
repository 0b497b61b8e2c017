//! Coupled variational policy-gradient training for small autoregressive
//! sequence models.
//!
//! A single model plays three roles through its conditioning layout: the
//! question-only trace prior, the answer-conditioned trace posterior, and the
//! answer predictor. Training samples whole traces from either layout,
//! re-weights them toward the token-level equal mixture of the two, and
//! optimizes a clipped importance-weighted surrogate plus a selective answer
//! likelihood and a control-variate KL penalty. Every estimator has an
//! enumeration oracle on the tabular backend.

pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod coupled;
pub mod error;
pub mod estimators;
pub mod gradcheck;
pub mod oracle;
pub mod policy;
pub mod tasks;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
