//! Error type shared by every module of the library.

use thiserror::Error;

/// Errors produced by kernel evaluation, assembly, inversion and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A kernel that is singular on the diagonal was evaluated at coincident points.
    #[error("kernel evaluated at coincident points x = y = {x:?}")]
    CoincidentPoints { x: [f64; 3] },

    /// Kernel evaluation failed while assembling block (i, j).
    #[error("kernel evaluation failed at grid indices ({i}, {j}): {source}")]
    Assembly {
        i: usize,
        j: usize,
        #[source]
        source: Box<Error>,
    },

    /// Input violated a documented precondition.
    #[error("invalid input: {0}")]
    Validation(String),

    /// A matrix expected to be Hermitian was not.
    #[error("matrix is not Hermitian (defect {defect:.3e})")]
    NonHermitian { defect: f64 },

    /// A linear solve hit a numerically singular matrix.
    #[error("singular operator at lambda = {lambda}: sigma_min = {sigma_min:.3e}")]
    Singular { lambda: f64, sigma_min: f64 },

    /// An operation that needs a non-regular threshold was handed a regular one.
    #[error("operation requires a threshold eigenvalue but zero is regular")]
    RegularThreshold,

    /// The non-regular route cannot be evaluated exactly at zero energy.
    #[error("lambda = 0 is excluded when zero is not regular")]
    ZeroEnergyExcluded,

    /// Oscillatory quadrature resolution is too coarse for the requested time.
    #[error("lambda lattice spacing {spacing} too coarse for t = {t}; refine to below {needed}")]
    Resolution { t: f64, spacing: f64, needed: f64 },

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// CSV serialization failure.
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
