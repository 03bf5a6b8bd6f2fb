//! Ridged eigenvalue-ratio rank estimation.
//!
//! For a non-negative definite matrix with eigenvalues `l_1 >= ... >= l_m`
//! the rank estimate is `argmin_j (l_{j+1} + c) / (l_j + c)` over `j in [m]`,
//! with `l_{m+1} := 0`. The ridge `c > 0` removes the `0/0` cases.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative slack for negative eigenvalues produced by rounding.
pub const NEGATIVE_EIGEN_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioPath {
    /// Descending, clipped at zero.
    pub eigenvalues: Vec<f64>,
    pub ridge: f64,
    /// `ratios[j-1] = (l_{j+1} + c) / (l_j + c)` for `j = 1..=search_max`.
    pub ratios: Vec<f64>,
    /// The selected rank (1-based position of the smallest ratio).
    pub rank: usize,
}

fn clip_spectrum(eigenvalues: &[f64]) -> Result<Vec<f64>> {
    let top = eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let floor = -NEGATIVE_EIGEN_SLACK * top;
    eigenvalues
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                Err(Error::Numerical(format!("non-finite eigenvalue {v}")))
            } else if v < floor || (top == 0.0 && v < 0.0) {
                Err(Error::NotPsd(v))
            } else {
                Ok(v.max(0.0))
            }
        })
        .collect()
}

/// Smallest ridged ratio of consecutive eigenvalues over the first
/// `search_max` positions. Ties resolve to the smallest index.
pub fn ratio_rank(eigenvalues: &[f64], ridge: f64, search_max: usize) -> Result<RatioPath> {
    if eigenvalues.is_empty() {
        return Err(Error::InvalidInput("empty spectrum".into()));
    }
    if search_max == 0 || search_max > eigenvalues.len() {
        return Err(Error::InvalidInput(format!(
            "search range {search_max} outside 1..={}",
            eigenvalues.len()
        )));
    }
    if !(ridge > 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidInput(format!("ridge must be positive, got {ridge}")));
    }
    let lambda = clip_spectrum(eigenvalues)?;
    if lambda.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::InvalidInput("eigenvalues must be sorted in descending order".into()));
    }
    let next = |j: usize| lambda.get(j + 1).copied().unwrap_or(0.0);
    let ratios: Vec<f64> = (0..search_max)
        .map(|j| (next(j) + ridge) / (lambda[j] + ridge))
        .collect();
    let mut best = 0;
    for (j, r) in ratios.iter().enumerate() {
        if *r < ratios[best] {
            best = j;
        }
    }
    Ok(RatioPath { eigenvalues: lambda, ridge, ratios, rank: best + 1 })
}

fn spectrum_of(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    linalg::check_symmetric(m, 1e-8)?;
    let (vals, _) = linalg::sym_eigen_desc(m);
    Ok(vals.iter().copied().collect())
}

/// Search range for the row and column ranks: the leading half of the
/// spectrum. The final ratio `c / (l_m + c)` dominates in finite samples
/// whenever the smallest eigenvalue is far above the ridge.
pub fn half_range(m: usize) -> usize {
    m.div_ceil(2).max(1)
}

/// Row and column ranks from `M1` (p x p) and `M2` (q x q), each searched
/// over [`half_range`].
pub fn estimate_d12(
    m1: &DMatrix<f64>,
    m2: &DMatrix<f64>,
    c1: f64,
    c2: f64,
) -> Result<(RatioPath, RatioPath)> {
    let s1 = spectrum_of(m1)?;
    let s2 = spectrum_of(m2)?;
    let r1 = ratio_rank(&s1, c1, half_range(s1.len()))?;
    let r2 = ratio_rank(&s2, c2, half_range(s2.len()))?;
    Ok((r1, r2))
}

/// Number of factors from `M` of size `d1 d2`, searched over
/// `1..d1 d2` (the last ratio against an implicit zero is left out). When
/// `d1 d2 = 1` the answer is 1 regardless of `M`.
pub fn estimate_d(m: &DMatrix<f64>, c3: f64, d1: usize, d2: usize) -> Result<RatioPath> {
    let size = d1 * d2;
    if m.nrows() != size || m.ncols() != size {
        return Err(Error::Shape(format!(
            "M is {}x{}, expected {size}x{size}",
            m.nrows(),
            m.ncols()
        )));
    }
    if size == 1 {
        return Ok(RatioPath {
            eigenvalues: vec![m[(0, 0)].max(0.0)],
            ridge: c3,
            ratios: Vec::new(),
            rank: 1,
        });
    }
    let s = spectrum_of(m)?;
    ratio_rank(&s, c3, size - 1)
}
