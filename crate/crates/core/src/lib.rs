//! Desk-scale numerical core for dynamic-convolution crack detection experiments.
//!
//! Everything is built on a dense f64 [`tensor::Tensor`] and a recording
//! [`autodiff::Tape`] that replays reverse-mode gradients. On top of that
//! sit the three mechanisms this crate exists to verify:
//!
//! - [`warehouse`]: kernel banks shared across a stage, assembled per input
//!   by a sign-preserving normalized attention with temperature annealing;
//! - [`attention`]: the triple attention block (channel, spatial, and an
//!   LSTM long-range branch fused by averaging);
//! - [`losses`]: the IoU loss family from plain IoU/CIoU up to the composite
//!   FP-IoU, as plain functions and as differentiable tape graphs.
//!
//! [`synth`], [`metrics`] and [`train`] provide the synthetic crack dataset,
//! detection/segmentation evaluation, and the SGD experiment harness that the
//! companion CLI drives. The crate is `no_std`-compatible (`alloc` required);
//! disable default features and enable `libm` for freestanding builds.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("crackle requires either the `std` or the `libm` feature");

pub mod attention;
pub mod autodiff;
pub mod error;
pub(crate) mod fmath;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod warehouse;

pub use error::{Error, Result};
pub use tensor::Tensor;
