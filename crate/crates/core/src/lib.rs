//! Bayesian invariant prediction.
//!
//! Given observations grouped into environments, infer which subset of
//! features leaves the conditional distribution of the outcome unchanged
//! across environments. The posterior over feature selectors is computed
//! exactly by enumeration ([`exact`]) or approximated with a mean-field
//! Bernoulli family ([`vi`]). [`synthetic`] generates linear-Gaussian
//! multi-environment data with known ground truth and [`metrics`] scores
//! estimates against it.

pub mod baselines;
pub mod data;
pub mod error;
pub mod exact;
pub mod io;
pub mod metrics;
pub mod mle;
pub mod numeric;
pub mod rng;
pub mod sweep;
pub mod synthetic;
pub mod vi;

pub use data::{DEFAULT_ENUMERATION_CAP, EnvBlock, FeatureSelector, LogMass, MultiEnvDataset, Prior, PriorKind};
pub use error::{BipError, Result};
