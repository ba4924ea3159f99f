//! Causal discovery and forecasting for tensor time series.
//!
//! Per-timestamp instantaneous structure is learned by an acyclicity-constrained
//! variational structural model ([`inner`]); a diffusion-convolutional GRU
//! consumes the resulting graph sequence to forecast and to expose summary
//! Granger causes ([`outer`]); a feature autoencoder scores anomalies by
//! reconstruction error ([`anomaly`]). [`trainer`] interleaves the phases and
//! [`eval`] scores the results.

pub mod anomaly;
pub mod diffkit;
pub mod eval;
pub mod error;
pub mod graph;
pub mod inner;
pub mod outer;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
