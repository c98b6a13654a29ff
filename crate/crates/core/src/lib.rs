//! Linear mode connectivity modulo permutation for multilayer perceptrons.
//!
//! The crate covers the full pipeline: a deterministic trainer
//! ([`train`]), permutation algebra on parameter bundles ([`model`]),
//! permutation search by weight or activation matching ([`align`]), loss and
//! error barriers along linear paths ([`connectivity`]), and iterative
//! magnitude pruning with mask transport ([`sparsity`]).

pub mod align;
pub mod connectivity;
pub mod data;
pub mod error;
pub mod model;
pub mod sparsity;
pub mod train;

pub use error::{Error, Result};
