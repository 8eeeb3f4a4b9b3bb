//! A small deep-learning framework and experiment harness for studying how
//! adversarial fine-tuning of batch-normalization layers affects robustness.
//!
//! The crate provides reverse-mode autodiff ([`autodiff`]), pre-activation
//! ResNets with fully controllable batch-norm semantics ([`nn`]), dataset
//! loaders ([`data`]), L∞ attacks and robust evaluation ([`attacks`]),
//! standard/adversarial training with parameter freezing ([`training`]),
//! the normalized-affine analysis of batch norm ([`analysis`]) and the
//! checkpoint/config/experiment plumbing behind the command-line tool.

pub mod analysis;
pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorClass, Result};
pub use tensor::Tensor;
