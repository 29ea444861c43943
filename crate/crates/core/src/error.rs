use std::path::PathBuf;

/// Errors raised across the crate.
///
/// The variants line up with the CLI exit codes: parameter and configuration
/// errors are caller mistakes, numeric and I/O errors are runtime failures,
/// and invariant violations mean a contract the code promises was broken.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invariant violation in {op}: {detail}")]
    Invariant { op: &'static str, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! bail_param {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Parameter(format!($($arg)*)))
    };
}

macro_rules! bail_config {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Config(format!($($arg)*)))
    };
}

pub(crate) use bail_config;
pub(crate) use bail_param;
