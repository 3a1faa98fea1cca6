//! Quantization-aware training on small models with coreset selection.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`graph`]: dense `f64` tensors and a define-by-run
//!   reverse-mode autodiff tape with custom-gradient nodes.
//! - [`quant`]: fake quantization with a straight-through estimator and a
//!   learnable step size.
//! - [`model`]: MLP and small CNN classifiers with fake-quant nodes and named
//!   taps on intermediate layers, plus the checkpoint format.
//! - [`loss`]: distillation, layer-correction, total and cross-entropy losses.
//! - [`coreset`]: per-sample scoring and top-fraction selection.
//! - [`train`]: optimizers, full-precision pretraining and the coreset QAT loop.
//! - [`data`]: synthetic generators, IDX and CSV loaders, splits and batching.
//! - [`analysis`]: rank correlation, layer KL, timing and ablation summaries.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod coreset;
pub mod data;
pub mod error;
pub mod graph;
pub mod loss;
pub mod model;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{CustomGradRule, Graph, Var};
pub use tensor::Tensor;

/// Small constant added inside every logarithm of a probability.
pub const LOG_EPS: f64 = 1e-12;
