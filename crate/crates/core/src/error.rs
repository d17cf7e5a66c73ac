use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("svd did not converge after {sweeps} sweeps (max off-diagonal ratio {off_diag:.3e})")]
    SvdNoConvergence { sweeps: usize, off_diag: f64 },

    #[error("every key is masked for query row {row}")]
    DegenerateMask { row: usize },

    #[error("backward: {0}")]
    Graph(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("forward trace has no `{0}` entry")]
    MissingTrace(&'static str),

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// True for errors caused by the caller's configuration or input files
    /// rather than by a failure during computation.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parse { .. } | Error::Data(_))
    }
}
