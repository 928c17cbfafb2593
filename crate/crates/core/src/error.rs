use thiserror::Error;

use crate::ItemId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no interactions")]
    NoInteractions,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("infinite divergence: item {0} has mass under q but not under p")]
    InfiniteDivergence(ItemId),

    #[error("missing embedding for item {0}")]
    MissingEmbedding(ItemId),

    #[error("unknown item {0}")]
    UnknownItem(ItemId),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate latent state")]
    DegenerateLatent,

    #[error("empty history")]
    EmptyHistory,

    #[error("step {step} out of range 1..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
