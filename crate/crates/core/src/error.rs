use thiserror::Error;

/// Errors raised anywhere in the retrieval pipeline.
#[derive(Debug, Error)]
pub enum PigError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl PigError {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        PigError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code used by the `pig` binary: 2 for usage problems,
    /// 3 for data or format problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PigError::Usage(_) | PigError::Config(_) => 2,
            PigError::Data(_) | PigError::Format(_) | PigError::Io(_) | PigError::Csv(_) => 3,
            PigError::Input(_) | PigError::Shape { .. } => 3,
            PigError::Numeric(_) | PigError::Invariant(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, PigError>;
