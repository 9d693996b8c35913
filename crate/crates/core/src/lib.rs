//! Quantization toolkit for small convolutional networks.
//!
//! The float side simulates quantization ([`quant`], [`graph`], [`qat`]);
//! the integer side ([`kernels`]) executes converted models with 8-bit codes
//! and 32-bit accumulators only.

pub mod analysis;
pub mod data;
pub mod format;
pub mod graph;
pub mod kernels;
pub mod ops;
pub mod ptq;
pub mod qat;
pub mod quant;
pub mod tensor;

pub use quant::{Granularity, QuantError, QuantParams, RangeSpec, Scheme};
pub use tensor::{QTensor, Tensor};
