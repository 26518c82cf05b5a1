//! Structured channel pruning for small convolutional networks.
//!
//! The pipeline: sparse training pushes batch-norm scales toward zero,
//! block importances are read off the mean |gamma| per block, a bisection over
//! a single proportionality factor finds per-block keep ratios that meet a
//! FLOPs budget, and the pruned network is initialized by whichever
//! weight-inheritance criterion scores best after batch-norm recalibration.

pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
pub mod importance;
pub mod inheritance;
pub mod ir;
pub mod pipeline;
pub mod planner;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
