use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {value} at row {row}, column {col}")]
    NonFiniteInput { row: usize, col: usize, value: f64 },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{what} requires at least {min} samples, got {got}")]
    TooFewSamples { what: &'static str, min: usize, got: usize },

    #[error("forward pass of {op} produced a non-finite value")]
    NonFiniteForward { op: &'static str },

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("{0}")]
    InvalidInput(String),

    #[error("empty group {group}: probability undefined")]
    EmptyGroup { group: usize },

    #[error("class {class} absent from group {group}")]
    ClassAbsent { class: usize, group: usize },

    #[error("csv error at row {row}, column {col}: {msg}")]
    Csv { row: usize, col: String, msg: String },

    #[error("unknown column {0}")]
    UnknownColumn(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    CsvParse(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
