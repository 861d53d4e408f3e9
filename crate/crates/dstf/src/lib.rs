//! Small-scale CNN training with dual sparsity: activation-map sparsity
//! induced through differentiable penalties and weight sparsity through
//! magnitude pruning, plus exact zero-skip multiply accounting.
//!
//! Everything is CPU, f32 storage with f64 reduction accumulators, and
//! bit-reproducible for a fixed seed.

pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod optimizer;
pub mod persistence;
pub mod pipeline;
pub mod pruning;
pub mod regularizers;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
