use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error at node {node}: {message}")]
    Shape { node: String, message: String },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("`{0}` is not an input of this graph")]
    UnknownInput(String),

    #[error("gradient requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite state at sampler step {step}: {what}")]
    SamplerDiverged { step: usize, what: String },

    #[error("zero initial gradient: adaptive normalization cannot register a norm")]
    ZeroInitialGradient,

    #[error("region mask is empty")]
    EmptyRegion,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("unknown attribution method `{0}`")]
    UnknownMethod(String),

    #[error("missing metadata: {0}")]
    MissingMetadata(String),

    #[error("corrupt tensor file {path}: {reason}")]
    CorruptTensor { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
