//! Skeleton gait classification with dynamic spatio-temporal graphs,
//! graph-selective state-space blocks and cross-graph relational
//! knowledge distillation.
//!
//! The crate is a desk-scale numerical toolkit: every layer runs on a small
//! reverse-mode autodiff engine over `f64` tensors, so gradients, scans and
//! loss identities can be checked exactly against independent references.
//!
//! Module map:
//!
//! - [`autodiff`]: tensors on a tape, backward pass, gradient checker
//! - [`graph`]: skeleton topology, dynamic and block adjacency, graph layers
//! - [`ssm`]: discretization, normalized selective scan, the state-space block
//! - [`model`]: teacher and student networks, checkpoints
//! - [`distill`]: task, alignment and relational losses, memory bank
//! - [`data`]: sequence ingestion, augmentation, standardization, folds, synthetic gait
//! - [`metrics`]: confusion counts and classification metrics
//! - [`harness`]: run configuration, training loops, cross-validation, reports
//! - [`cli`]: the `dynstg` command line

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod params;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
