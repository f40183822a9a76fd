//! Sparse (partial) Bayesian neural networks.
//!
//! A deterministic network is trained first, squared gradients pick the
//! most influential weights, and only those become Gaussian and are trained
//! with a variational objective. The rest of the network stays a point
//! estimate, which keeps sampling cheap.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod saliency;
pub mod tensor;
pub mod variational;

pub use error::{Error, Result};
