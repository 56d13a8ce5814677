use thiserror::Error;

/// Errors produced by the SLAM backend.
#[derive(Debug, Error)]
pub enum SlamError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("frame ids differ between trajectories: {0}")]
    MismatchedFrames(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("point cloud has no normals")]
    MissingNormals,

    #[error("tracking lost: {0}")]
    TrackingLost(String),

    #[error("pose graph is not connected: {0}")]
    DisconnectedGraph(String),

    #[error("broken correspondence link: {0}")]
    BrokenLink(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SlamError>;

impl SlamError {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        SlamError::Parse {
            line,
            message: message.into(),
        }
    }
}
