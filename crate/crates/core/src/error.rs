use thiserror::Error;

use crate::train::Checkpoint;

/// Errors produced by the gcq library.
#[derive(Debug, Error)]
pub enum GcqError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("stability condition violated (radicand {radicand:.6e} < 0)")]
    StabilityViolation { radicand: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("relaxation did not converge within {steps} steps (last residual {residual:.3e})")]
    NoConvergence { steps: usize, residual: f64 },

    #[error("action map is not injective: `{first}` and `{second}` share the same moves")]
    NonInjectiveActionMap { first: String, second: String },

    #[error("action map holds {count} symbols but {factors} factors support at most {capacity}")]
    ActionCapacity {
        count: usize,
        factors: usize,
        capacity: usize,
    },

    #[error("unknown action `{0}`")]
    UnknownAction(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("operation requires a codebook with learnable = {expected}")]
    LearnableFlagMismatch { expected: bool },

    #[error("computation graph is not acyclic at node {0}")]
    GraphCycle(usize),

    #[error("maze free region is disconnected")]
    DisconnectedMaze,

    #[error("invalid maze: {0}")]
    InvalidMaze(String),

    #[error("greedy iteration made no progress between observations {pair} and {next} (from {from:?} to {to:?})", next = pair + 1)]
    NoProgress {
        pair: usize,
        from: Vec<usize>,
        to: Vec<usize>,
    },

    #[error("malformed {format} data: {reason}")]
    Decode { format: &'static str, reason: String },

    #[error("config error in [{section}]{}: {reason}", key.as_ref().map(|k| format!(" `{k}`")).unwrap_or_default())]
    Config {
        section: String,
        key: Option<String>,
        reason: String,
    },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize, last_good: Box<Checkpoint> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GcqError>;

impl GcqError {
    pub(crate) fn decode(format: &'static str, reason: impl Into<String>) -> Self {
        GcqError::Decode {
            format,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(section: &str, key: Option<&str>, reason: impl Into<String>) -> Self {
        GcqError::Config {
            section: section.to_string(),
            key: key.map(str::to_string),
            reason: reason.into(),
        }
    }
}
