//! Crate-wide error type.

use thiserror::Error;

/// Error type shared by all modules in this crate.
#[derive(Debug, Error)]
pub enum LaserError {
    /// A token id fell outside the vocabulary.
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    /// A sequence exceeded the model's maximum sequence length.
    #[error("sequence length {len} exceeds capacity {max}")]
    CapacityExceeded { len: usize, max: usize },

    /// Per-position coefficients did not line up with the sequence.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An operation that needs at least one element got none.
    #[error("empty batch")]
    EmptyBatch,

    /// Group-relative advantages need at least two samples.
    #[error("group size {0} is below the minimum of 2")]
    GroupTooSmall(usize),

    /// Two parallel lists had different lengths.
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },

    /// A score or loss that must be finite was not.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Configuration failed validation.
    #[error("config error: {field}: {msg}")]
    Config { field: String, msg: String },

    /// A checkpoint file failed to parse or its integrity hash mismatched.
    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),

    /// A JSONL record failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Conflicting records for the same problem id.
    #[error("duplicate problem id {id} with conflicting ground truth")]
    DuplicateProblem { id: u64 },

    /// The operation requires a terminated (EOS-ending) solution.
    #[error("solution is not terminated (no EOS)")]
    NotTerminated,

    /// A training step produced a non-finite loss or gradient.
    #[error("aborted at step {step}: {detail}")]
    StepAborted { step: u64, detail: String },

    /// Another process holds the output directory.
    #[error("output directory is locked by another run: {0}")]
    OutDirLocked(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LaserError>;

impl LaserError {
    /// Process exit code for the CLI: 2 for usage/config problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            LaserError::Config { .. } => 2,
            _ => 1,
        }
    }
}
