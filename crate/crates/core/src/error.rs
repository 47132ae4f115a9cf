use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("pose ({x:.3}, {y:.3}) is not in free space")]
    InvalidPose { x: f64, y: f64 },
    #[error("scene generation failed: {0}")]
    SceneGeneration(String),
    #[error("episode already finished")]
    EpisodeDone,
    #[error("walk {walk}: too short for the requested pairs ({detail})")]
    WalkTooShort { walk: String, detail: String },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
