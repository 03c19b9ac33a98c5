use std::path::PathBuf;

/// Errors produced by the DIRE pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },

    #[error("step index {t} out of range [{min}, {max}]")]
    StepOutOfRange { t: usize, min: usize, max: usize },

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("record {id}: {message}")]
    Record { id: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short stable identifier, used for machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::StepOutOfRange { .. } => "step_out_of_range",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Empty(_) => "empty_input",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Record { .. } => "record",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::InvalidParameter(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
