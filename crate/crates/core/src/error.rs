use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {0:?}: {1}")]
    InvalidShape(Vec<usize>, String),

    #[error("backward called twice on the same tape without reset")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor does not belong to this tape")]
    Detached,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("frozen parameters were mutated during {0}")]
    FrozenMutation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown token {0:?}")]
    UnknownToken(char),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<R, E = Error> = std::result::Result<R, E>;
