//! Memory-efficient few-shot meta-learning with sparse per-layer step sizes,
//! channel attention over weight gradients, and an analytical profiler of
//! adaptation memory and compute.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod error;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod plan;
pub mod report;
pub mod rng;
pub mod runtime;
pub mod spec;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
