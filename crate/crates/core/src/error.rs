use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("gradient output must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("chart point too close to the pole (theta = {theta})")]
    ChartPole { theta: f64 },
    #[error("point is off the manifold by {distance:e}")]
    OffManifold { distance: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("degenerate kernel bandwidth: {0}")]
    Bandwidth(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("target density vanishes numerically at the query point")]
    ZeroDensity,
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
