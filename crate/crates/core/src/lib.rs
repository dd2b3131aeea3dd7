//! Multiscale-fusion Transformer for supervised anomaly detection on
//! multivariate telemetry windows.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod training;

pub use error::{Error, Result};
