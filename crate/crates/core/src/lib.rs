//! Data augmentation invariance for All-CNN-C on CIFAR-10.
//!
//! Training adds an auxiliary loss that pulls together the activations of
//! augmented copies of the same image, relative to the spread of the whole
//! batch, at every convolutional layer. Evaluation measures how invariant
//! each layer is to held-out extreme transformations.
//!
//! | module | contents |
//! |---|---|
//! | [`dataset`] | CIFAR-10 binary loader, channel statistics, cache |
//! | [`augment`] | affine + photometric augmentation |
//! | [`network`] | All-CNN-C forward/backward, checkpoints |
//! | [`objective`] | invariance loss, α schedule, cross-entropy |
//! | [`batcher`] | seed ring and grouped batches |
//! | [`trainer`] | SGD training loop and overhead measurement |
//! | [`evaluator`] | invariance scores and accuracy |
//! | [`config`], [`artifacts`], [`report`] | run configuration and files |
//! | [`verify`] | numerical self-checks |

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod augment;
pub mod batcher;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod network;
pub mod objective;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
