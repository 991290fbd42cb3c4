//! Mean-teacher domain-adaptive detection transformer, end to end on a
//! synthetic domain-shift benchmark: a cross-scale attention detector,
//! EMA teacher with shared object queries and thresholded pseudo labels,
//! three adversarial feature-alignment heads behind gradient reversal,
//! the two-step burn-in/transfer policy, and mAP@0.5 evaluation.

pub mod alignment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod mean_teacher;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
