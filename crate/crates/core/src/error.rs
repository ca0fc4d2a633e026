use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid parameter `{name}`: {detail}")]
    Parameter { name: &'static str, detail: String },

    #[error("singular schedule: alpha_bar = {0} leaves no signal to reconstruct")]
    SingularSchedule(f64),

    #[error("invalid condition token {token} (vocabulary size {vocab})")]
    InvalidToken { token: usize, vocab: usize },

    #[error("training diverged at step {step}: loss = {loss} (last finite loss {last_finite})")]
    TrainingDiverged {
        step: usize,
        loss: f64,
        last_finite: f64,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("malformed weights file: {0}")]
    Format(String),

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

    pub(crate) fn param(name: &'static str, detail: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            detail: detail.into(),
        }
    }
}
