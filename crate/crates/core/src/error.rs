use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: shape {shape:?} needs {expected} values, got {actual}")]
    InvalidShape {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("unsupported primitive `{name}` (supported: {supported})")]
    UnsupportedPrimitive { name: String, supported: String },

    #[error("gradient output must be a scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("output does not depend on any differentiable input (detached tensor)")]
    Detached,

    #[error("variable was recorded on a different tape")]
    ForeignTape,

    #[error("ReLU is not twice differentiable; switch the network to Softplus mode before taking second-order gradients")]
    NotTwiceDifferentiable,

    #[error("softplus beta must be positive and finite, got {0}")]
    InvalidBeta(f64),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("bad magic: expected {expected}, found {actual}")]
    BadMagic { expected: String, actual: String },

    #[error("weight file truncated in layer {layer}")]
    Truncated { layer: usize },

    #[error("weight file does not match the architecture at layer {layer}: {detail}")]
    WeightShape { layer: usize, detail: String },

    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("malformed IDX file {path}: {detail}")]
    Idx { path: PathBuf, detail: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("degenerate explanation: heatmap is identically zero")]
    DegenerateExplanation,

    #[error("degenerate ensemble: all members are identical, AGG-Var is undefined")]
    DegenerateEnsemble,

    #[error("heatmap is not normalized")]
    NotNormalized,

    #[error("undefined correlation: input map is constant")]
    UndefinedCorrelation,

    #[error("zero-norm input")]
    ZeroNorm,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("attack aborted at iteration {iteration}: {reason}")]
    AttackAborted { iteration: usize, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
