use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid argument `{field}`: {message}")]
    InvalidArg { field: String, message: String },

    #[error("network build failed at layer {layer}: {message}")]
    BadNetwork { layer: usize, message: String },

    #[error("non-finite value produced in {context}")]
    NonFinite { context: String },

    #[error("file format error in {path}: {message}")]
    BadFile { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(field: &str, message: impl Into<String>) -> Self {
        Error::InvalidArg { field: field.to_string(), message: message.into() }
    }

    pub fn bad_file(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::BadFile { path: path.into(), message: message.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
