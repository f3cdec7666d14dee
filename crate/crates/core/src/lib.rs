//! Object-centric video learning with a dynamic number of slots.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`]: tensors, a tape-based reverse-mode autodiff graph, the parameter
//!   store and finite-difference gradient checking.
//! * [`data`]: seeded moving-sprite videos, frame-directory ingestion and the
//!   frozen patch-feature projection that produces the reconstruction target.
//! * [`slot_attention`], [`decoder`], [`merger`], [`dtst`]: the model.
//! * [`training`]: two-stage training, optimizer and inference rollout.
//! * [`metrics`]: mBO-F, mBO-V, mBHD, FG-ARI and CorLoc.
//! * [`config`], [`checkpoint`], [`eval`]: the command-line harness.
//!
//! All numerics are generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks). Concrete aliases are provided below.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod dtst;
pub mod error;
pub mod eval;
pub mod merger;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod slot_attention;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision tensor used for training and inference.
pub type Tensor32 = nn::Tensor<f32>;
/// Double-precision tensor used for gradient checks.
pub type Tensor64 = nn::Tensor<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type SlotFrame32 = slot_attention::SlotFrame<f32>;
pub type SlotSequence32 = slot_attention::SlotSequence<f32>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
