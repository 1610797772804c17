//! Single-image super-resolution with a very deep residual convolutional
//! network, implemented from scratch: dense tensor kernels with analytic
//! backprop, SGD with momentum and learning-rate-adjusted gradient clipping,
//! a bicubic multi-scale data pipeline, and PSNR/SSIM benchmarking.
//!
//! The network takes a bicubically upscaled low-resolution luminance image
//! and predicts the residual (high-frequency detail); adding the residual
//! back to the input yields the super-resolved output. See the `examples/`
//! directory for runnable entry points into every major capability, or the
//! `vdsr` binary for the command-line surface.

pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
pub use network::VdsrModel;
pub use tensor::{ConvParams, Tensor};
