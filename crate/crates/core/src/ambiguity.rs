//! Confidence schedules `β_n` and Wasserstein-ball radii `ε(β_n)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Light-tail concentration constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcentrationParams {
    pub c1: f64,
    pub c2: f64,
    /// Light-tail exponent, `a > 1`.
    #[serde(default = "default_tail_exponent")]
    pub a: f64,
    /// Sample dimension.
    pub m: usize,
}

fn default_tail_exponent() -> f64 {
    2.0
}

impl ConcentrationParams {
    pub fn new(c1: f64, c2: f64, a: f64, m: usize) -> Result<Self> {
        let p = ConcentrationParams { c1, c2, a, m };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Config(format!("c1 = {} and c2 = {} must be positive", self.c1, self.c2)));
        }
        if !(self.a > 1.0) {
            return Err(Error::Config(format!("tail exponent a = {} must exceed 1", self.a)));
        }
        if self.m == 0 {
            return Err(Error::Config("sample dimension must be positive".into()));
        }
        Ok(())
    }
}

/// Radius of the Wasserstein ball holding the true distribution with
/// probability at least `1 − beta` after `n` samples.
pub fn radius(params: &ConcentrationParams, beta: f64, n: usize) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Config(format!("beta = {beta} must lie in (0, 1)")));
    }
    if n == 0 {
        return Err(Error::Config("radius needs at least one sample".into()));
    }
    let log_term = (params.c1 / beta).ln();
    if !(log_term > 0.0) {
        return Err(Error::RadiusUndefined { beta, c1: params.c1, log_term });
    }
    let n = n as f64;
    let base = log_term / (params.c2 * n);
    // m = 2 is outside the concentration bound's stated range; the
    // max{2, m} exponent is applied unchanged there.
    let exponent = if n >= log_term / params.c2 {
        1.0 / (params.m.max(2) as f64)
    } else {
        1.0 / params.a
    };
    Ok(base.powf(exponent))
}

/// A confidence schedule `n ↦ β_n ∈ (0, 1)`.
#[derive(Clone)]
pub enum ConfidenceSchedule {
    /// `β_n = scale · exp(1 − √n)`.
    ExpSqrt { scale: f64 },
    Custom(Arc<dyn Fn(usize) -> f64 + Send + Sync>),
}

impl ConfidenceSchedule {
    /// The schedule used by both simulation studies, `0.95·e^{1−√n}`.
    pub fn study() -> Self {
        ConfidenceSchedule::ExpSqrt { scale: 0.95 }
    }

    pub fn beta(&self, n: usize) -> f64 {
        match self {
            ConfidenceSchedule::ExpSqrt { scale } => scale * (1.0 - (n as f64).sqrt()).exp(),
            ConfidenceSchedule::Custom(f) => f(n),
        }
    }

    /// `ε(β_n)` for this schedule.
    pub fn radius(&self, params: &ConcentrationParams, n: usize) -> Result<f64> {
        radius(params, self.beta(n), n)
    }
}

impl fmt::Debug for ConfidenceSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfidenceSchedule::ExpSqrt { scale } => f.debug_struct("ExpSqrt").field("scale", scale).finish(),
            ConfidenceSchedule::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}
