//! Long-horizon multivariate forecasting with an adaptive mixture of
//! Gaussian band-pass frequency experts.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod filterbank;
pub mod moge;
pub mod ndmath;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
