use thiserror::Error;

/// Errors raised by the network, training harness and reports.
#[derive(Debug, Error)]
pub enum HerbsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("unsupported backbone kind `{0}`")]
    UnsupportedBackbone(String),

    #[error("invalid variant `{0}` (expected one of a, b, c, d, e)")]
    InvalidVariant(String),

    #[error("top-k {k} out of range for {locations} locations")]
    TopKOutOfRange { k: usize, locations: usize },

    #[error("combiner received no selected tokens")]
    EmptySelection,

    #[error("labels are required to compute losses")]
    MissingLabels,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("temperature must be positive and at least 0.125, got {0}")]
    InvalidTemperature(f64),

    #[error("missing classifier heads: {0}")]
    MissingHeads(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite {component} loss at epoch {epoch}, micro-batch {step}")]
    NonFiniteLoss { component: &'static str, epoch: usize, step: usize },

    #[error("non-finite network parameters")]
    NonFiniteParams,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<image::ImageError> for HerbsError {
    fn from(e: image::ImageError) -> Self {
        HerbsError::Image(e.to_string())
    }
}

pub type Result<T, E = HerbsError> = std::result::Result<T, E>;
