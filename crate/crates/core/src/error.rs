use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("validation error in {record}: {message}")]
    Validation { record: String, message: String },
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("tokenization error: {0}")]
    Tokenization(String),
    #[error("degenerate fusion: mean of view embeddings is the zero vector")]
    DegenerateFusion,
    #[error("degenerate projection: pre-normalization vector is zero")]
    DegenerateProjection,
    #[error("degenerate rotation: raw quaternion has zero norm")]
    DegenerateRotation,
    #[error("proposal error: {0}")]
    Proposal(String),
    #[error("projection error: {0}")]
    Projection(String),
    #[error("training diverged at iteration {iteration}; last finite losses: {last_finite}")]
    Divergence { iteration: usize, last_finite: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
