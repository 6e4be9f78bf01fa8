//! Crate-wide error type.

use crate::registry::Violation;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {}x{}, right is {}x{}", lhs.0, lhs.1, rhs.0, rhs.1)]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("label {label} out of range for {num_classes} classes at row {row}")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("validation: {0}")]
    Validation(String),

    #[error("routing entropy undefined: expert {expert} has zero accumulated weight mass")]
    UndefinedEntropy { expert: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("bad magic bytes {found:?}, expected \"MOEC\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported bundle format version {0}")]
    UnsupportedFormatVersion(u16),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("tensor {name}: shape {}x{} does not match manifest ({}x{})", actual.0, actual.1, expected.0, expected.1)]
    TensorShapeMismatch {
        name: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("expert {expert_id} version {version} already registered")]
    DuplicateVersion { expert_id: String, version: String },

    #[error("expert {expert_id}@{version} not found in registry")]
    MissingExpert { expert_id: String, version: String },

    #[error("incompatible contribution:{}", violations.iter().map(|v| format!("\n  - {v}")).collect::<String>())]
    Incompatible { violations: Vec<Violation> },
}

impl Error {
    /// Process exit code for the CLI: 2 input/validation, 3 compatibility, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 4,
            Error::Incompatible { .. } | Error::DuplicateVersion { .. } => 3,
            _ => 2,
        }
    }
}
