//! Deep dictionary learning.
//!
//! A hierarchy of synthesis dictionaries is trained for image classification:
//! each layer encodes patches of its input grid with a nonnegative elastic-net
//! sparse code, adjacent codes are regrouped into the next layer's input, and
//! a linear + ReLU head classifies the top-level features. Dictionaries are
//! trained by differentiating the classification loss through every sparse
//! coding problem implicitly (on the active set of each code).
//!
//! Companion modules cover the asymptotic LASSO predictions used to reason
//! about layer widths ([`asymptotics`]), mutual-information profiling and
//! adversarial robustness ([`analysis`]), and dataset ingestion
//! ([`datasets`]).

pub mod analysis;
pub mod asymptotics;
pub mod autodiff;
pub mod classifier;
pub mod datasets;
pub mod error;
pub mod linalg;
pub mod network;
pub mod patch_ops;
pub mod rng;
pub mod sparse_coding;
pub mod trainer;

pub use error::{CheckpointError, DatasetError, DdlError, Result};
