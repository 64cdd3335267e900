use std::path::{Path, PathBuf};

/// Errors raised by the toolkit's IO, formats and orchestration.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] redry_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file exists but its contents are malformed.
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Process exit codes of the `redry` binary.
pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const VALIDATION: i32 = 2;
    pub const IO: i32 = 3;
    pub const DIVERGENCE: i32 = 4;
    pub const FORMAT: i32 = 5;
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, detail: impl std::fmt::Display) -> Self {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            detail: detail.to_string(),
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Core(redry_core::Error::Validation(msg.into()))
    }

    pub fn exit_code(&self) -> i32 {
        use redry_core::Error as C;
        match self {
            Error::Core(C::Validation(_) | C::Shape { .. }) | Error::Config(_) => exit_code::VALIDATION,
            Error::Core(C::Divergence { .. }) => exit_code::DIVERGENCE,
            Error::Core(C::Numerical(_)) => exit_code::INTERNAL,
            Error::Io { .. } => exit_code::IO,
            Error::Format { .. } => exit_code::FORMAT,
        }
    }
}
