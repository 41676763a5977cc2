use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty shape: {0}")]
    EmptyShape(String),

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("singular transform: |det| = {det:e}")]
    SingularTransform { det: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("optimization failed at stage {stage}: {message} (after {} accepted steps)", trace.len())]
    Optimization {
        stage: usize,
        message: String,
        trace: Vec<f64>,
    },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn mismatch(expected: (usize, usize), got: (usize, usize)) -> Self {
        Error::DimensionMismatch { expected, got }
    }
}
