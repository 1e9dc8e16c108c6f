//! Wave-equation surrogate operators for room acoustics.
//!
//! The crate covers the whole pipeline: an impedance-boundary finite-difference
//! solver that produces reference wave fields, dataset generation and batching,
//! a DeepONet with modified-MLP branch and trunk networks trained with
//! self-adaptive point weights, domain decomposition and transfer learning,
//! and impulse-response evaluation.

pub mod config;
pub mod dataset;
pub mod deeponet;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod pipeline;
pub mod solver;
pub mod specialization;

pub use error::{Error, Result};
