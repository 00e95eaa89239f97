use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the attack pipeline.
///
/// Variants are grouped by how the CLI reports them: configuration problems,
/// data problems (files, shapes, formats) and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("bad magic in {}", .0.display())]
    BadMagic(PathBuf),

    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("no latent available for class {0}")]
    MissingLatent(u32),

    #[error("latent for class {latent} does not match target class {target}")]
    LatentMismatch { latent: u32, target: u32 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Debug,
        found: impl std::fmt::Debug,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: format!("{expected:?}"),
            found: format!("{found:?}"),
        }
    }

    /// Process exit status used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Io { .. }
            | Error::MissingFile(_)
            | Error::BadMagic(_)
            | Error::Format { .. }
            | Error::ShapeMismatch { .. }
            | Error::MissingLatent(_)
            | Error::LatentMismatch { .. }
            | Error::EmptyInput(_)
            | Error::Codec(_) => 3,
            Error::NonFinite(_) | Error::Degenerate(_) | Error::Tensor(_) => 4,
        }
    }
}
