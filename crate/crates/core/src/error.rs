//! Error type shared by every module of the crate.

use crate::maxent::ArModel;

/// Errors raised by the numerical routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible matrix or series dimensions.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A matrix that must be invertible (or positive definite) is not.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// An iterative solver hit its iteration cap.
    #[error("no convergence: {0}")]
    NoConvergence(String),

    /// The innovation-model solver hit its iteration cap. Carries the last
    /// iterate so callers can inspect how far it got.
    #[error(
        "maximum-entropy solver stopped after {iters} iterations \
         (decrement^2/2 = {decrement_sq_half:.3e}, feasibility = {feasibility:.3e})"
    )]
    MaxentNotConverged {
        iters: usize,
        decrement_sq_half: f64,
        feasibility: f64,
        last: Box<ArModel>,
    },

    /// A pipeline stage failed; the stage name locates the failure.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    /// Malformed configuration or input file.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Filesystem or serialization failure in the harness.
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
