use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported in this weight mode: {0}")]
    UnsupportedMode(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("version mismatch: expected {expected}, found {found}")]
    Version { expected: u16, found: u16 },
    #[error("line count mismatch: {left} vs {right} lines")]
    LineCount { left: usize, right: usize },
    #[error("invalid UTF-8 in {0}")]
    Utf8(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
