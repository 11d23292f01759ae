use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("batch normalization needs a batch of at least 2 rows in train mode, got {size}")]
    DegenerateBatch { size: usize },

    #[error("no gradient recorded for parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged (non-finite loss) in stage {stage} at step {step}")]
    Divergence { stage: &'static str, step: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("joint {joint} is behind the camera (depth {depth} mm)")]
    BehindCamera { joint: usize, depth: f64 },

    #[error("dataset format error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    DatasetFormat { line: Option<usize>, msg: String },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
