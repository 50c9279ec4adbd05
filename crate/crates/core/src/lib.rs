//! Hybrid classification/localization objectness for open-world proposals.
//!
//! The crate covers box geometry, anchor matching, the hybrid loss and its
//! baselines, score blending with NMS, class-agnostic recall evaluation, a
//! small differentiable proposal model and the pseudo-label self-training
//! loop that ties them together.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchors;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod scoring;
pub mod self_training;
pub mod toy_model;

pub use error::{Error, Result};
