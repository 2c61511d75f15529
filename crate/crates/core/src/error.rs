use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("division by zero in {0}")]
    DivisionByZero(&'static str),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("state error: {0}")]
    State(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: expected magic {expected:#010x}, found {observed:#010x}")]
    Format { expected: u32, observed: u32 },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("training diverged at epoch {epoch}, instance {instance}: {detail}")]
    Divergence {
        epoch: usize,
        instance: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
