//! Amortized posterior inference for factorized Bayesian models.

pub mod box_modules;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod factor_model;
pub mod network;
pub mod params;
pub mod rng;
pub mod simulator;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{AfinError, Result};
