//! Crate-wide error type.

use std::error;
use std::fmt;
use std::io;
use std::path::PathBuf;
use std::result;

/// A type alias for `Result<T, Error>`.
pub type Result<T> = result::Result<T, Error>;

/// Everything that can go wrong across the toolkit.
#[derive(Debug)]
pub enum Error {
    /// A text artifact (inventory, lexicon, vocab, config, dataset) failed to
    /// parse. Carries the file, the 1-based line, and a reason.
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    /// Vocabulary construction failed (empty corpus, budget too small).
    Build(String),
    /// A mask plan does not fit the sequence it is applied to.
    Plan(String),
    /// An invalid configuration value or combination.
    Config(String),
    /// A sequence is longer than the model's positional table.
    Length { len: usize, max: usize },
    /// A non-finite value was produced, with the location that produced it.
    Numerics(String),
    /// A caller violated an operation's precondition.
    Contract(String),
    /// A binary artifact is malformed (bad magic, version, truncation).
    Format(String),
    /// A checkpoint refers to artifacts other than the ones supplied.
    Compat(String),
    /// An underlying I/O failure, with the path involved.
    Io { path: PathBuf, source: io::Error },
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Parse { path, line, msg } => {
                write!(f, "parse error in {}, line {}: {}", path.display(), line, msg)
            }
            Error::Build(msg) => write!(f, "vocabulary build error: {}", msg),
            Error::Plan(msg) => write!(f, "mask plan error: {}", msg),
            Error::Config(msg) => write!(f, "config error: {}", msg),
            Error::Length { len, max } => {
                write!(f, "sequence length {} exceeds maximum {}", len, max)
            }
            Error::Numerics(msg) => write!(f, "non-finite value in {}", msg),
            Error::Contract(msg) => write!(f, "contract violation: {}", msg),
            Error::Format(msg) => write!(f, "binary format error: {}", msg),
            Error::Compat(msg) => write!(f, "artifact mismatch: {}", msg),
            Error::Io { path, source } => {
                write!(f, "i/o error on {}: {}", path.display(), source)
            }
        }
    }
}

impl error::Error for Error {
    fn source(&self) -> Option<&(dyn error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
