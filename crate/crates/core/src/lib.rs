//! Numerical laboratory for the relativistic α-stable process
//! `X_t = B_{T_β(t, m)}`: exact subordinator densities, free transition
//! densities, exact-in-law samplers, and Monte Carlo estimators for the
//! heat trace of the killed process on smooth bounded domains.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod error;
pub mod geometry;
pub mod kernels;
pub mod quad;
pub mod sampler;
pub mod specfun;
pub mod stats;
pub mod tracelab;

pub use error::{Error, Result};
pub use specfun::ProcessParams;
