//! Crowd instance localization with a dilated-convolution Swin transformer.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: a small reverse-mode autodiff kernel (conv, attention
//!   primitives, normalization) over `f32` tensors.
//! - [`nn`]: parameterized layers and checkpointable parameter tables.
//! - [`swin`], [`dcb`], [`fpn`]: the encoder, the dilated convolutional
//!   block inserted between stages, and the FPN decoder with its score head.
//! - [`model`]: the assembled network, image in, score map out.
//! - [`instance`]: threshold, connected components, instance centroids.
//! - [`metrics`]: radius-based one-to-one matching and the localization and
//!   counting metrics.
//! - [`data`]: synthetic crowd scenes, label masks, augmentation, file I/O.
//! - [`train`]: loss, AdamW, warmup, training loop, evaluation, threshold sweep.

pub mod data;
pub mod dcb;
pub mod error;
pub mod fpn;
pub mod instance;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod swin;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
