use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SitError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SitError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("parameter shape disagreement: {}", .0.join(", "))]
    Inherit(Vec<String>),
    #[error("zero-norm features in {0}")]
    ZeroNorm(&'static str),
    #[error("{0}")]
    Format(String),
    #[error("checksum mismatch for tensor `{name}`: stored {stored:08x}, computed {computed:08x}")]
    Checksum {
        name: String,
        stored: u32,
        computed: u32,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SitError {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        SitError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Stable snake_case tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            SitError::Shape { .. } => "shape",
            SitError::Axis { .. } => "axis",
            SitError::Index { .. } => "index",
            SitError::Config(_) => "config",
            SitError::NonFinite(_) => "non_finite",
            SitError::Inherit(_) => "inherit",
            SitError::ZeroNorm(_) => "zero_norm",
            SitError::Format(_) => "format",
            SitError::Checksum { .. } => "checksum",
            SitError::Io { .. } => "io",
            SitError::Json(_) => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SitError::Io {
            path: path.into(),
            source,
        }
    }
}
