//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("alignment: {source_path} has {source_lines} lines but {target_path} has {target_lines}")]
    Alignment {
        source_path: PathBuf,
        target_path: PathBuf,
        source_lines: usize,
        target_lines: usize,
    },

    #[error("{path}:{line}: empty line (one non-empty tokenized sentence per line required)")]
    EmptyLine { path: PathBuf, line: usize },

    #[error("{path}:{line}: token {token:?} collides with a reserved special token")]
    ReservedToken {
        path: PathBuf,
        line: usize,
        token: String,
    },

    #[error("empty corpus: {0}")]
    EmptyCorpus(&'static str),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error(
        "example {index} needs {tokens} tokens on its longer side but the token budget is {budget}"
    )]
    ExampleExceedsBudget {
        index: usize,
        tokens: usize,
        budget: usize,
    },

    #[error("batch index {index} out of range (plan has {len} batches)")]
    BatchIndexOutOfRange { index: usize, len: usize },

    #[error(
        "position {position} >= max_position {max_position}; raise max_position above max_shift + longest example"
    )]
    PositionOverflow { position: usize, max_position: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite loss {loss} at step {step} (batch {batch})")]
    NonFiniteLoss { loss: f64, step: usize, batch: usize },

    #[error("unknown condition {0:?}")]
    UnknownCondition(String),

    #[error("pipeline flags drifted from condition {condition:?}: {detail}")]
    FlagDrift { condition: String, detail: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
