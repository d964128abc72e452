//! Class-incremental learning workbench for semantic segmentation.
//!
//! The crate bundles a small reverse-mode autodiff engine, an encoder-decoder
//! segmentation network with per-stage head management, the incremental
//! learning losses (distillation, masked distillation, entropy weighting),
//! a synthetic stage-partitioned dataset, staged training and mIoU
//! evaluation. Numeric code is generic over [`Scalar`]; the aliases below fix
//! the element type to `f64`, which is what the training pipeline uses.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type Model = model::Model<f64>;
