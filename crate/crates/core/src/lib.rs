//! Quantization toolkit and heterogeneous dense/sparse accelerator model for
//! convolutional diffusion-model workloads.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensorkit`]: channel-last tensors, address arithmetic and bitmap
//!   compressed channel storage.
//! - [`quant`]: block-scaled integer formats, activation functions and
//!   quality metrics.
//! - [`netspec`]: U-Net style network descriptions, the weighted cost model,
//!   mixed-precision assignment and the integer reference convolution.
//! - [`sparsity`]: per-channel sparsity measurement, temporal traces and the
//!   trace file format.
//! - [`accel`]: analytical cycle and energy model of a DPE/SPE accelerator,
//!   plus the split dense/sparse convolution executor.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the common instantiations.

pub mod accel;
pub mod error;
pub mod netspec;
pub mod quant;
pub mod scalar;
pub mod sparsity;
pub mod tensorkit;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision activation tensor.
pub type Activation = tensorkit::ActivationTensor<f64>;
/// Single-precision activation tensor.
pub type Activation32 = tensorkit::ActivationTensor<f32>;
/// Double-precision weight tensor.
pub type Weights = tensorkit::WeightTensor<f64>;
/// Single-precision weight tensor.
pub type Weights32 = tensorkit::WeightTensor<f32>;
/// Double-precision quantized tensor.
pub type Quantized = quant::QuantizedTensor<f64>;
/// Single-precision quantized tensor.
pub type Quantized32 = quant::QuantizedTensor<f32>;
