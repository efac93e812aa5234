//! Portfolio optimization under a fast mean-reverting rough stochastic factor.
//!
//! The factor is a rescaled fractional Ornstein–Uhlenbeck process driving the drift and
//! volatility of a single risky asset. The crate provides the kernel and its covariance,
//! a path simulator, the leading-order and first-order value expansions for a power-utility
//! investor, Monte Carlo estimators of the same values, and diagnostics for the ergodic
//! quantities behind the expansion.

// `!(x > 0.0)` is deliberate throughout: it rejects NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod asymptotics;
pub mod diagnostics;
pub mod error;
pub mod fou;
pub mod kernel;
pub mod model;
pub mod montecarlo;
pub mod quadrature;
pub mod stats;

pub use error::{Error, Result};
