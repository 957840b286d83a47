use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("graph output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("clip bounds are inverted (lo {lo} > hi {hi})")]
    InvertedClip { lo: f64, hi: f64 },

    #[error("trajectory diverged: non-finite state at step {step}")]
    Diverged { step: usize },

    #[error("training diverged at epoch {epoch}, update {update}: {detail}")]
    TrainingDiverged {
        epoch: usize,
        update: usize,
        detail: String,
    },

    #[error("prompt mismatch: trajectories belong to prompts {a} and {b}")]
    PromptMismatch { a: usize, b: usize },

    #[error("unknown prompt id {prompt} (prompt count {count})")]
    UnknownPrompt { prompt: usize, count: usize },

    #[error("missing snapshot statistics for trajectory")]
    MissingSnapshot,

    #[error("no same-prompt pair available")]
    NoPairs,

    #[error("enumeration budget exceeded: {count} trajectories (limit {limit})")]
    BudgetExceeded { count: usize, limit: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
