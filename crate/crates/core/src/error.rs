//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up; names both shapes.
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    Shape {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A contract on an operation's inputs was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or config file.
    #[error("config error: {0}")]
    Config(String),

    /// Class id outside the configured class set.
    #[error("class id {class_id} out of range (classes: {n_classes})")]
    InvalidClass { class_id: usize, n_classes: usize },

    /// Affine transform with a singular linear part.
    #[error("singular affine transform (det = {det:e})")]
    SingularTransform { det: f64 },

    /// Paired lists of unequal length.
    #[error("length mismatch in {context}: {left} vs {right}")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    /// Brute-force oracle called on an instance above its size guard.
    #[error("size guard: {what} = {got} exceeds limit {limit}")]
    SizeGuard {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    /// Box with non-positive extent after clipping.
    #[error("degenerate box (w = {w:e}, h = {h:e})")]
    DegenerateBox { w: f64, h: f64 },

    /// Training produced a non-finite loss; carries the offending batch ids.
    #[error("non-finite loss at iteration {iteration} (batch {batch:?})")]
    NonFinite { iteration: u64, batch: Vec<u64> },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed dataset, checkpoint, or report input.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Stable process exit code for the CLI: 2 config/usage, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) => 2,
            Error::NonFinite { .. } => 3,
            _ => 1,
        }
    }
}
