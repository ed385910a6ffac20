//! Online data assimilation for Wasserstein distributionally robust
//! optimization.
//!
//! Samples arrive one at a time. At every moment the solver keeps a
//! decision together with an approximate worst-case expected cost over a
//! Wasserstein ball around the data seen so far: the *certificate*. The
//! pieces are:
//!
//! * [`model`]: cost functions `f(x, ξ)` and their gradient oracles.
//! * [`ambiguity`]: confidence schedules and Wasserstein radii.
//! * [`simplex`]: point search over signed vertices and the away-step
//!   Frank-Wolfe maximizer.
//! * [`certgen`]: certificate generation with a warm-startable vertex set.
//! * [`subgrad`]: ε-subgradient decision updates.
//! * [`onda`]: the event-driven orchestrator.
//! * [`icover`]: incremental ball cover and the weighted empirical measure.
//! * [`transport`]: exact discrete 1-Wasserstein distance.
//! * [`stream`]: seeded data generators and arrival schedules.

// `!(v > 0.0)` deliberately rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ambiguity;
pub mod certgen;
mod error;
pub mod icover;
pub mod model;
pub mod onda;
pub mod par;
pub mod simplex;
pub mod stream;
pub mod subgrad;
pub mod transport;

pub use error::{Error, Result};
