//! In-context memorization by nonlinear attention.
//!
//! The crate pairs a deterministic-equivalent prediction of the training error of
//! a ridge-regularized linear probe on single-head attention outputs with a Monte
//! Carlo simulator of the same model.
//!
//! - [`nonlinearity`]: activation catalog and Gaussian Hermite moments.
//! - [`selfconsistent`]: fixed-point system for the noise-only resolvent traces.
//! - [`theory`]: predicted error for attention and for ridge regression.
//! - [`simulate`]: sampling, kernels, empirical errors and diagnostics.
//! - [`experiments`]: parameter sweeps, figure presets and CSV output.

pub mod error;
pub mod experiments;
pub mod nonlinearity;
pub mod selfconsistent;
pub mod simulate;
pub mod theory;

pub use error::{Error, Result};
