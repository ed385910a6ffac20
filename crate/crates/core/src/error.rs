use thiserror::Error;

use crate::model::ModelError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("radius undefined: log(c1/beta) = {log_term} must be positive (beta = {beta}, c1 = {c1})")]
    RadiusUndefined { beta: f64, c1: f64, log_term: f64 },

    #[error("objective decreased from {before} to {after}; the certificate objective is not concave (local strong concavity assumption violated)")]
    NonConcave { before: f64, after: f64 },

    #[error("objective returned a non-finite value ({0})")]
    NonFinite(f64),

    #[error("distribution is not normalized: weights sum to {0}")]
    Unnormalized(f64),

    #[error("cover invariant violated: {0}")]
    Cover(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("optimizer did not converge: {0}")]
    NotConverged(String),

    #[error("arrival stream: {0}")]
    Stream(String),
}
