use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("linear solve failed on {dim}-node system: {reason}")]
    Solver { dim: usize, reason: String },

    #[error("crossbar tile ({tile_row}, {tile_col}) of layer `{layer}`: {source}")]
    Tile {
        layer: String,
        tile_row: usize,
        tile_col: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("degenerate firing threshold {threshold} at layer {layer}")]
    DegenerateThreshold { layer: usize, threshold: f64 },

    #[error("network structure mismatch: {0}")]
    Structure(String),

    #[error("{path}: parse error at byte offset {offset}: {msg}")]
    Parse { path: PathBuf, offset: u64, msg: String },

    #[error("model container: {0}")]
    Format(String),

    #[error("unsupported model container version {found} (reader supports {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("missing trajectory: {0}")]
    MissingTrajectory(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
