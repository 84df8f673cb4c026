use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyperparameter, shape contract or missing artifact.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed scene, checkpoint or config file.
    #[error("parse error in `{field}`: {msg}")]
    Parse { field: String, msg: String },

    /// A loss or tensor went non-finite.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image export failed: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            msg: msg.into(),
        }
    }
}

/// Returns a configuration error unless `cond` holds.
macro_rules! ensure_config {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::Error::Config(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure_config;
