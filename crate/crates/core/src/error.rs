use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),

    #[error("unsupported NIfTI datatype code {0} (only float32=16 and float64=64)")]
    UnsupportedDatatype(i16),

    #[error("unsupported orientation: {0}")]
    UnsupportedOrientation(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("volume has no voxels inside the mask")]
    EmptyMask,

    #[error("non-finite value at masked voxel {0}")]
    NonFiniteData(usize),

    #[error(
        "circulant embedding is not positive definite (min eigenvalue {min_eig:.3e}); \
         enlarge the extended grid or allow eigenvalue clamping"
    )]
    NotPositiveDefinite { min_eig: f64 },

    #[error("kriging system singular at target ({x:.3}, {y:.3}, {z:.3}) mm even after jitter")]
    SingularSystem { x: f64, y: f64, z: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite result: {0}")]
    NonFinite(String),

    #[error("optimizer failed: {0}")]
    Optimizer(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by files or arguments rather than by the numerics.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::MalformedHeader(_)
                | Error::UnsupportedDatatype(_)
                | Error::UnsupportedOrientation(_)
                | Error::InvalidArgument(_)
        )
    }
}
