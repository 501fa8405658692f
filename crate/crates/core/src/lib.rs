//! Attention-guided structured channel pruning for CIFAR-style CNNs.
#![allow(clippy::needless_range_loop, clippy::large_enum_variant)]

pub mod attention;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod pruner;
pub mod real;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
