use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),
    #[error("gradient supplied for `{0}`, which is not a trainable parameter")]
    UnexpectedGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("unknown word `{0}` (not in vocabulary)")]
    UnknownToken(String),
    #[error("caption has {len} tokens including BOS/EOS, limit is {max}")]
    CaptionTooLong { len: usize, max: usize },
    #[error("invalid subject position {position}: {reason}")]
    InvalidPosition { position: usize, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed {kind}: {reason}")]
    Format { kind: &'static str, reason: String },
    #[error("missing input {0}")]
    MissingInput(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
