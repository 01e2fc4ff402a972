//! Variational model perturbation for source-free domain adaptation.
//!
//! A source model's weights stay frozen; adaptation learns only the
//! log-variances of zero-mean Gaussian perturbations around them (plus BN
//! statistics), fit by variational inference on unlabeled target data.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod container;
pub mod domains;
pub mod error;
pub mod nn;
pub mod objectives;
pub mod perturbation;
pub mod protocols;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
