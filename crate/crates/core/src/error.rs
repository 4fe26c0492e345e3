use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("zero-norm input to slerp")]
    ZeroNorm,

    #[error("invalid timestep: {0}")]
    InvalidTimestep(String),

    #[error("singular affine transform (det = {0})")]
    SingularTransform(f64),

    #[error("insufficient tree levels: {0}")]
    InsufficientLevels(String),

    #[error("timesteps must be strictly increasing")]
    NonMonotoneTimesteps,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("backend does not support {0}")]
    Unsupported(&'static str),

    #[error("missing parent frame {0}")]
    MissingParent(usize),

    #[error("unknown candidate {0}")]
    UnknownCandidate(usize),

    #[error("unknown node {0}")]
    UnknownNode(usize),

    #[error("empty candidate set")]
    EmptyCandidates,

    #[error("candidate {0} has not been scored")]
    Unscored(usize),

    #[error("empty pose skeleton")]
    EmptySkeleton,

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("corrupt latent cache: {0}")]
    CorruptCache(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
