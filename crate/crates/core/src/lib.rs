//! Desk-scale dataset distillation laboratory.
//!
//! Synthetic datasets are parameterized as spectrum tensors decoded by
//! separable per-mode kernel factors, optimized by matching expert
//! training trajectories with real-distribution guidance, under an
//! explicit storage budget.

pub mod config;
pub mod container;
pub mod dataset;
pub mod decomposition;
pub mod diffmath;
pub mod error;
pub mod evalharness;
pub mod matching;
pub mod models;
pub mod par;
pub mod rng;
pub mod transforms;

pub use error::{Error, Result};
