use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// configuration/usage problems exit 2, I/O and file-format problems exit 3,
/// numeric failures exit 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint/config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("unsupported format version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("manifest row {row}: {reason}")]
    Manifest { row: usize, reason: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("unknown class {name:?}; valid classes: {valid}")]
    UnknownClass { name: String, valid: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 i/o, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Parameter(_)
            | Error::Config(_)
            | Error::ConfigMismatch(_)
            | Error::Contract(_)
            | Error::UnknownClass { .. } => 2,
            Error::Io { .. }
            | Error::Corrupt { .. }
            | Error::VersionMismatch { .. }
            | Error::Manifest { .. }
            | Error::Image { .. } => 3,
            Error::Numeric(_) | Error::UndefinedMetric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
