//! Video shadow detection at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`autodiff`]),
//! the deformation-trajectory attention family ([`attention`]), a
//! massive-positive-pair shadow contrastive loss ([`contrastive`]),
//! segmentation losses ([`losses`]), a three-stage segmentation pipeline
//! ([`model`]), evaluation metrics ([`metrics`]), synthetic data and file
//! formats ([`data`]) and independent brute-force references ([`oracle`]).

pub mod attention;
pub mod autodiff;
pub mod contrastive;
pub mod data;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use tensor::{Tensor, TensorError};
