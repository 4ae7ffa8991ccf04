//! Surrogate gamma-spectrum domain-adaptation toolkit.
//!
//! The pipeline covers synthetic spectrum generation with a configurable
//! detector response, four neural classifiers trained on an in-crate
//! autodiff engine, transfer protocols with layer freezing, diagnostic
//! metrics, exact paired significance tests, and KernelSHAP explanations.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod spectra;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
