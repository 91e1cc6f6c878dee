use thiserror::Error;

/// Errors produced anywhere in the engine.
///
/// Variants are grouped by the kind of failure so front ends can map them to
/// exit codes without inspecting messages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("archive format error: {0}")]
    ArchiveFormat(String),

    #[error("tokenization error: unknown word {0:?}")]
    Tokenize(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("degenerate subspace: {0}")]
    DegenerateSubspace(String),

    #[error("intervention error: {0}")]
    Intervention(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("memory budget exceeded: {needed} elements requested, budget is {budget}; lower component_batch or group components")]
    Budget { needed: usize, budget: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
