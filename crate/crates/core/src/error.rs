use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("backward was already run on this tape; record a new forward pass first")]
    BackwardReentry,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss does not depend on any tensor that requires a gradient")]
    DetachedLoss,

    /// Mean magnitude of a layer is zero, so no scale can be derived.
    #[error("degenerate quantization scale (mean weight magnitude is {mean})")]
    DegenerateScale { mean: f32 },

    #[error("value {value} at index {index} is not on the {n_values}-value grid")]
    OffGrid {
        index: usize,
        value: f32,
        n_values: u16,
    },

    #[error("packed payload is corrupt: {0}")]
    CorruptPayload(String),

    #[error("bad magic bytes {0:02x?}, expected \"LBQ1\"")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("malformed model file: {0}")]
    Format(String),

    #[error("dataset error in {path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: {source}")]
    Diverged {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("model was loaded for inference only and cannot be trained")]
    InferenceOnly,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
