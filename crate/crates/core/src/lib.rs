//! Desk-scale semi-supervised object detection lab.
//!
//! A miniature DETR-style detector trained with a teacher-student loop:
//! query refinement from weak-view features, reliable pseudo-label
//! filtering with augmented ground-truth groups, EMA teacher updates, and
//! a stage-wise one-to-many → one-to-one assignment schedule. Everything
//! runs on a small tape-based autodiff engine over 64-bit reals, on a
//! deterministic synthetic shapes dataset, in minutes on CPU.

pub mod assignment;
pub mod augmentation;
pub mod cli;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod numerics;
pub mod params;
pub mod pseudo_labels;
pub mod query_refine;
pub mod report;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
