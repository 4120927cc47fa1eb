use thiserror::Error;

/// Unified error type for the whole pipeline.
///
/// Variants are grouped by how the CLI maps them to exit codes: input and
/// configuration problems ([`Error::exit_code`] 2), checkpoint problems
/// (exit code 3), everything else (exit code 1).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate pose: {0}")]
    DegeneratePose(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("unknown identifier: {0}")]
    UnknownId(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::DegeneratePose(_)
            | Error::Config(_)
            | Error::Malformed { .. }
            | Error::SchemaVersion { .. }
            | Error::UnknownId(_)
            | Error::Io(_) => 2,
            Error::Checkpoint(_) => 3,
            Error::NonFinite(_) => 1,
        }
    }

    pub fn malformed(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
