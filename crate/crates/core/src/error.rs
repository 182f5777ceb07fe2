//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by the numerical kernel, the model, and the harness.
#[derive(Debug, Error)]
pub enum SpclError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate embedding: norm {norm:e} below threshold {threshold:e}")]
    DegenerateEmbedding { norm: f64, threshold: f64 },

    #[error("schedule exhausted: step {step} past total {total}")]
    ScheduleExhausted { step: usize, total: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("state error: {0}")]
    State(String),

    #[error("training failure: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SpclError {
    /// Wrap an error with (seed, task) context so harness failures are traceable.
    pub fn with_run_context(self, seed: u64, task: usize) -> SpclError {
        SpclError::Training(format!("seed {seed}, task {task}: {self}"))
    }
}

pub type Result<T> = std::result::Result<T, SpclError>;
