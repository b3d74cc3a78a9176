use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("unknown question id {0}")]
    Registry(u32),

    #[error("token {token} outside vocabulary of size {vocab}")]
    Vocabulary { token: u32, vocab: usize },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("tie between compared values ({0})")]
    Tie(f64),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Whether the error reports a broken runtime invariant rather than bad
    /// input or configuration.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::Evaluation(_) | Error::Partition(_) | Error::Tie(_)
        )
    }
}
