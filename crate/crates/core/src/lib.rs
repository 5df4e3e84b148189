//! Merge-resistant model protection for a toy transformer.
//!
//! A defender rewrites a finetuned checkpoint with function-preserving
//! transformations (MLP hidden-unit permutation, per-head attention
//! rescaling, optional sparse pruning) so that merging it with other
//! models descended from the same pretrained weights stops working. The
//! crate also provides the merge methods being defended against, an
//! adaptive recovery attack, activation and parameter diagnostics, and a
//! small transformer with exact gradients to run everything on.
//!
//! Every numeric routine is generic over [`scalar::Scalar`] (`f32` or
//! `f64`); the aliases below fix the scalar for the common cases.

pub mod arch;
pub mod assignment;
pub mod checkpoint;
pub mod error;
pub mod pmck;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod model;
pub mod defense;
pub mod merging;
pub mod attack;
pub mod analysis;
pub mod experiment;

pub use error::{Error, Result};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type TaskVector64 = merging::TaskVector<f64>;
pub type Batch64 = model::Batch<f64>;
