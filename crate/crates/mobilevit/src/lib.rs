//! From-scratch mobile vision transformer blocks in pure Rust.
//!
//! The crate builds everything on one small stack: dense f64 tensors, a
//! reverse-mode autodiff tape, convolution/attention building blocks, two
//! compact image classifiers, a training loop, softmax ensembling, evaluation
//! metrics, and visual explanations.

pub mod bench;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;
pub mod weights;
pub mod xai;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{grad_check, Gradients, OpKind, Tape, Var};
pub use tensor::{broadcast_shapes, Tensor};
pub mod cli;
