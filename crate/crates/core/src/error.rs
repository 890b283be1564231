use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
///
/// The variants fall into two families that the CLI maps onto distinct exit
/// codes: contract violations (bad shapes, out-of-range values, degenerate
/// inputs) and format/I-O failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    /// Every nonzero pixel of the loss mask was empty.
    #[error("degenerate mask: no pixel selected for the loss")]
    DegenerateMask,

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error: 1 for contract errors, 2 for
    /// format and I/O errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::Contract(_)
            | Error::DegenerateMask
            | Error::NonFiniteGradient { .. } => 1,
            Error::Format { .. } | Error::Io { .. } | Error::Json(_) => 2,
        }
    }
}
