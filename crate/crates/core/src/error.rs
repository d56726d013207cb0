//! Crate-wide error type and result alias.

use thiserror::Error;

/// Everything that can go wrong across the crate, from shape mismatches in
/// the tensor engine up to malformed dataset files.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller-supplied value violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A token sequence violates the serialization format invariants.
    #[error("transcript format error: {0}")]
    TranscriptFormat(String),

    /// No feasible speaker assignment exists (more utterances than the
    /// adjacency constraint permits with the given profile count).
    #[error("infeasible speaker assignment: {0}")]
    InfeasibleAssignment(String),

    /// Training produced a non-finite loss; the run must abort.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    /// Reference and hypothesis files disagree on sample identity.
    #[error("sample id mismatch: {0}")]
    IdMismatch(String),

    /// A serialized artifact (checkpoint, dataset, config) is malformed.
    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
