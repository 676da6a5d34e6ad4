use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Array or image dimensions disagree.
    #[error("shape error: {0}")]
    Shape(String),

    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("no floor plane found: {0}")]
    NoFloor(String),

    /// A required input attribute (normals, provenance, ...) is missing.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// Loss became non-finite during optimization.
    #[error("numerical abort at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
