//! Reduced partition models for parameterised quantum circuits.
//!
//! The crate contains a small state-vector simulator, exact gate cutting,
//! the reduced model itself with its gradients, shot-noise estimators,
//! training and data utilities.

pub mod circuit;
pub mod cli;
pub mod data;
pub mod cutter;
pub mod error;
pub mod experiments;
pub mod qsim;
pub mod rng;
pub mod rpm;
pub mod shots;
pub mod train;
pub mod verify;

#[cfg(test)]
pub(crate) mod testing;

pub use error::{Error, Result};
