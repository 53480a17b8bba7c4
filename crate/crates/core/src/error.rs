use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("degenerate input in {op}: row {row} has norm {norm:e}")]
    Degenerate {
        op: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("non-finite value during training at epoch {epoch}, {param}: norm {norm}")]
    NonFinite {
        epoch: usize,
        param: String,
        norm: f64,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("retrieval error: {0}")]
    Retrieval(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Short machine-readable tag, used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Domain { .. } => "domain",
            Error::Degenerate { .. } => "degenerate",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Size(_) => "size",
            Error::Split(_) => "split",
            Error::NonFinite { .. } => "non_finite",
            Error::Format(_) => "format",
            Error::Retrieval(_) => "retrieval",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
