use thiserror::Error;

use crate::nn::ParamSet;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("capacity exceeded: {count} sources, at most {max} allowed")]
    Capacity { count: usize, max: usize },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("{stage} training diverged at epoch {epoch}; last good weights retained")]
    Diverged {
        stage: String,
        epoch: usize,
        last_good: Option<Box<ParamSet<f32>>>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("adapter `{role}`: {message}")]
    Adapter { role: String, message: String },

    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            got,
        }
    }

    /// Short machine-readable kind, used in structured CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Precondition(_) => "precondition",
            Error::Capacity { .. } => "capacity",
            Error::NonFinite(_) => "training",
            Error::Diverged { .. } => "diverged",
            Error::Numeric(_) => "numeric",
            Error::Parse { .. } => "parse",
            Error::Schema { .. } => "schema",
            Error::Checkpoint(_) => "checkpoint",
            Error::MissingTensor(_) => "checkpoint",
            Error::Adapter { .. } => "adapter",
            Error::Input(_) => "input",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
