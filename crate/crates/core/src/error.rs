use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("direction is not unit norm (|v| = {norm})")]
    NotUnit { norm: f64 },

    #[error("index {index} out of range for {len} elements")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("variant {variant} needs a patch centroid")]
    MissingCentroid { variant: &'static str },

    #[error("output point {index} has an empty neighbourhood")]
    EmptyNeighborhood { index: usize },

    #[error("l1 loss over zero valid entries")]
    NoValidEntries,

    #[error("mask selects no voxels")]
    EmptyMask,

    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate diffusion model: {0}")]
    DegenerateDiffusivity(String),

    #[error("all-zero data cannot be normalised")]
    ZeroData,

    #[error("shell b={0} is not present in the dataset")]
    MissingShell(f64),

    #[error("spherical harmonic design matrix is rank deficient (condition {0:e})")]
    RankDeficient(f64),

    #[error("zero-norm coefficient vector")]
    ZeroNorm,

    #[error("protocol mismatch: {0}")]
    Protocol(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
