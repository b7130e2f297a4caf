//! Identification of low-rank stochastic vector processes from noisy
//! measurements.
//!
//! A stationary vector process whose spectral density has rank `l` below its
//! dimension `m + l` splits into a full-rank latent block and a measured
//! block tied to it by a deterministic causal relation. Measurement noise
//! hides the rank deficiency, so the estimation runs in two stages:
//!
//! 1. [`maxent`] fits an AR innovation model of the latent block by a
//!    graph-constrained maximum-entropy covariance extension of the
//!    noise-compensated lags, and [`latent_filter`] recovers the latent time
//!    series with a noise-weighted recursion.
//! 2. [`armax_ml`] estimates the relation by constrained maximum likelihood
//!    on the resulting ARMAX model, whose residual covariance couples to the
//!    AR parameters through the shared noise.
//!
//! [`simgen`] builds synthetic systems and seeded records, [`spectral`]
//! holds the covariance/spectral machinery and the structural diagnostic,
//! and [`harness`] wires everything into reproducible experiments.

pub mod armax_ml;
pub mod error;
pub mod harness;
pub mod latent_filter;
pub mod maxent;
pub mod polymat;
pub mod simgen;
pub mod spectral;

pub use armax_ml::{PerRowDegrees, RegressorSet, ThetaParams};
pub use error::{Error, Result};
pub use harness::RunConfig;
pub use maxent::{ArModel, LatentTopology};
pub use polymat::{CMatrix, Complex64, MatrixPolynomial};
pub use simgen::{RationalFilter, SimRecord, SystemSpec};
pub use spectral::{CovarianceSequence, FrequencyGrid};
