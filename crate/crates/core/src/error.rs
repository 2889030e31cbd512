use thiserror::Error;

use crate::bundle::BundleError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix data length {len} does not match shape {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("invalid convolution geometry: {0}")]
    Geometry(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("invalid selection problem: {0}")]
    Problem(String),

    #[error("group {0} is already selected")]
    AlreadySelected(usize),

    #[error("group {group} out of range (problem has {n_groups} groups)")]
    GroupOutOfRange { group: usize, n_groups: usize },

    #[error("budget {k} out of range 1..={max}")]
    BudgetOutOfRange { k: usize, max: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("instance too large for exhaustive oracle: {0}")]
    TooLarge(String),

    #[error("missing capture for layer {0}")]
    MissingCapture(String),

    #[error("target compression {target:.4} infeasible: smallest achievable size is {smallest} (original {original})")]
    Infeasible { target: f64, smallest: u64, original: u64 },

    #[error(transparent)]
    Bundle(#[from] BundleError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
