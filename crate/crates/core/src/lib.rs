//! Gated residual KAN forecasting with edge-level functional circuits.

pub mod circuits;
pub mod datagen;
pub mod error;
pub mod forecaster;
pub mod numerics;
pub mod splinekan;
pub mod trainer;

pub use error::{Error, Result};
