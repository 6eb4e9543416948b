//! Top-1 routed mixture-of-experts acoustic model.
//!
//! Routers in every MoE layer see a frame-level grapheme embedding and,
//! in the augmented variant, utterance-level accent and domain embeddings
//! produced by a shared multi-task embedding network. Training combines CTC
//! with sparsity, balance and classification losses and runs on a simulated
//! expert-parallel runtime.
//!
//! All numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix the element type.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod flops;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod model;
pub mod parallel;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use config::{AuxScope, ModelConfig, RouterVariant, RunConfig};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossWeights};
pub use model::Model;
pub use scalar::Scalar;
pub use tensor::{Gradient, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
