//! Uncertainty-aware dynamic threshold selection for class-imbalanced
//! semi-supervised classification.
//!
//! A small MLP is trained on a labeled split plus pseudo-labeled unlabeled
//! samples. Pseudo-labels are admitted by two gates: Monte Carlo dropout
//! uncertainty below a normalised per-class bound, and confidence above a
//! per-class threshold that tracks the model's learning state.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod rng;
pub mod selector;
pub mod sweep;
pub mod threshold;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, ErrorKind, Result};
