//! Training and structured pruning of small neural networks with
//! position-weighted ("guided") L1/L2 regularizers.
//!
//! The pipeline is: train with a guided penalty that pushes high-index
//! rows and columns of each weight matrix toward zero, remove every
//! neuron/channel whose absolute row sum falls below `alpha` times the
//! layer maximum, then fine-tune the smaller network without the penalty.

pub mod data;
pub mod error;
pub mod experiments;
pub mod nn;
pub mod pruning;
pub mod regularizers;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
