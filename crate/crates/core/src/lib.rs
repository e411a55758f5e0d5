//! Few-shot cloze fine-tuning engine.
//!
//! Task examples are rendered into cloze questions through pattern-verbalizer
//! templates, scored by a small built-in masked LM with exact gradients, and
//! fine-tuned with either a label-softmax cross-entropy or decoupled
//! binary-cross-entropy losses over the full vocabulary softmax, optionally
//! combined with a label-conditioned context-masking loss.
//!
//! All numeric kernels are generic over [`scalar::Scalar`] (`f32` or `f64`);
//! training and checkpoints use the `f32` aliases below.

pub mod catalog;
pub mod checkpoint;
pub mod eval;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod pvp;
pub mod scalar;
pub mod synthetic;
pub mod task;
pub mod tokenizer;
pub mod trainer;

pub use scalar::Scalar;

/// Scalar precision used for training and checkpoints.
pub type TrainScalar = f32;
/// Model parameters at training precision.
pub type Params32 = model::Params<f32>;
/// Model parameters at double precision, for high-accuracy checks.
pub type Params64 = model::Params<f64>;
/// Forward output at training precision.
pub type ForwardOutput32 = model::ForwardOutput<f32>;
