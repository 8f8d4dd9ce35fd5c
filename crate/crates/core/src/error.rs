use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate softmax row {row}: no allowed entries")]
    DegenerateRow { row: usize },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("token alignment error: independent block has {independent} tokens, contextual block has {contextual}")]
    Alignment { independent: usize, contextual: usize },

    #[error("slice out of range: boundary {index} ({start}+{len}) exceeds {total} tokens")]
    Slicing {
        index: usize,
        start: usize,
        len: usize,
        total: usize,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("transport error after {retries} retries: {message}")]
    Transport { retries: u32, message: String },

    #[error("training diverged at step {step}: loss {loss}")]
    Training { step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable short name of the variant, for structured reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::DegenerateRow { .. } => "degenerate_row",
            Error::Tape(_) => "tape",
            Error::InvalidLayout(_) => "invalid_layout",
            Error::Parameter(_) => "parameter",
            Error::Alignment { .. } => "alignment",
            Error::Slicing { .. } => "slicing",
            Error::Schema(_) => "schema",
            Error::Transport { .. } => "transport",
            Error::Training { .. } => "training",
            Error::Checkpoint(_) => "checkpoint",
            Error::Capacity(_) => "capacity",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
