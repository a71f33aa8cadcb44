//! Spatially correlated competing-risks failure-time models.
//!
//! Failure mode 1 follows a single log-location-scale distribution and mode 2 a
//! two-component mixture; each cabinet location carries a bivariate random
//! effect with separable covariance `Σ_f ⊗ Ω`, where `Ω` comes from a power
//! exponential correlation over a cylinder distance. The crate provides data
//! ingestion, simulation, a gradient-based MCMC sampler, Monte-Carlo EM,
//! convergence diagnostics and post-fit summaries.

pub mod data;
pub mod diagnostics;
pub mod distributions;
pub mod evaluation;
pub mod error;
pub mod mcem;
pub mod optim;
pub mod params;
pub mod posterior;
pub mod sampler;
pub mod simulation;
pub mod spatial;
pub mod special;

pub use error::{Error, Result};
