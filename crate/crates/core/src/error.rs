use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero variance: the series is constant")]
    ZeroVariance,

    #[error("non-finite value at time {time}, entry ({row}, {col})")]
    NonFinite { time: usize, row: usize, col: usize },

    #[error("insufficient lag support: lag {lag} needs n >= {needed}, got n = {n}")]
    InsufficientLag { lag: usize, n: usize, needed: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("no invertible combination found after {0} random draws")]
    NoInvertibleCombination(usize),

    #[error("rotation ill-conditioned: {0}")]
    RotationIllConditioned(String),

    #[error("diagonalizer degenerate at iteration {0}")]
    DiagonalizerDegenerate(usize),

    #[error("loadings not identifiable; use unified prediction ({0})")]
    NotIdentifiable(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("rank-condition redraw budget exhausted after {0} attempts")]
    RedrawExhausted(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),
}
