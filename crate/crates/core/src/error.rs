use std::fmt;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {kind}", path.display())]
    Format { path: PathBuf, kind: FormatError },

    #[error("config error: {0}")]
    Config(String),
}

/// Reasons a binary tensor, label or checkpoint file is rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatError {
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    Truncated { needed: usize, available: usize },
    UnsupportedVersion(u32),
    UnsupportedDtype(u8),
    TrailingBytes(usize),
    InvalidName,
    InvalidShape,
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::BadMagic { expected, found } => write!(
                f,
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(found)
            ),
            FormatError::Truncated { needed, available } => write!(
                f,
                "truncated: needed {needed} more bytes, {available} available"
            ),
            FormatError::UnsupportedVersion(v) => write!(f, "unsupported format version {v}"),
            FormatError::UnsupportedDtype(d) => write!(f, "unsupported dtype code {d}"),
            FormatError::TrailingBytes(n) => write!(f, "{n} trailing bytes after payload"),
            FormatError::InvalidName => write!(f, "record name is not valid UTF-8 or has no known group"),
            FormatError::InvalidShape => write!(f, "shape has a zero or overflowing dimension"),
        }
    }
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem or by malformed files.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Format { .. })
    }
}
