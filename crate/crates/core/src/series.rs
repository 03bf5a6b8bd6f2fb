//! Matrix time series containers and the second-moment estimators built on
//! them.
//!
//! Vectorization follows one fixed rule everywhere in the crate: `vec` of an
//! `m1 x m2` matrix stacks columns, so (1-based) entry `h_{i,j}` lands at
//! position `(j-1) m1 + i`. This is exactly nalgebra's column-major storage,
//! so `vec(H)` is `H.as_slice()`. Four-way tensors are vectorized with the
//! last index running fastest; see [`crate::psi::PsiTensor`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Share of total variation the leading principal components must reach
/// when forming the projection series.
pub const XI_VARIATION_SHARE: f64 = 0.99;

/// An ordered sequence of `n >= 2` real `p x q` observations.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSeries {
    p: usize,
    q: usize,
    data: Vec<DMatrix<f64>>,
    labels: Option<Vec<String>>,
}

impl MatrixSeries {
    pub fn new(data: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = data
            .first()
            .ok_or_else(|| Error::InvalidInput("empty series".into()))?;
        let (p, q) = first.shape();
        if data.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a series needs at least 2 observations, got {}",
                data.len()
            )));
        }
        if p == 0 || q == 0 {
            return Err(Error::InvalidInput("observations must be at least 1x1".into()));
        }
        for (t, y) in data.iter().enumerate() {
            if y.shape() != (p, q) {
                return Err(Error::Shape(format!(
                    "observation {t} is {}x{}, expected {p}x{q}",
                    y.nrows(),
                    y.ncols()
                )));
            }
            for j in 0..q {
                for i in 0..p {
                    if !y[(i, j)].is_finite() {
                        return Err(Error::NonFinite { time: t, row: i, col: j });
                    }
                }
            }
        }
        Ok(Self { p, q, data, labels: None })
    }

    /// Builds a series from an `n x pq` row-major buffer where row `t` is
    /// `vec(Y_t)`.
    pub fn from_vec_rows(p: usize, q: usize, rows: &[f64]) -> Result<Self> {
        let width = p * q;
        if width == 0 || rows.len() % width != 0 {
            return Err(Error::Shape(format!(
                "buffer of length {} is not a multiple of p*q = {width}",
                rows.len()
            )));
        }
        let data = rows
            .chunks(width)
            .map(|r| DMatrix::from_column_slice(p, q, r))
            .collect();
        Self::new(data)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} observations",
                labels.len(),
                self.data.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn get(&self, t: usize) -> &DMatrix<f64> {
        &self.data[t]
    }

    pub fn observations(&self) -> &[DMatrix<f64>] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// The `n x pq` data matrix whose row `t` is `vec(Y_t)`.
    pub fn data_matrix(&self) -> DMatrix<f64> {
        let width = self.p * self.q;
        let mut m = DMatrix::zeros(self.n(), width);
        for (t, y) in self.data.iter().enumerate() {
            for (c, v) in y.as_slice().iter().enumerate() {
                m[(t, c)] = *v;
            }
        }
        m
    }

    /// Observations `start .. start + len` as a new series.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.n() {
            return Err(Error::InvalidInput(format!(
                "window {start}..{} exceeds series length {}",
                start + len,
                self.n()
            )));
        }
        let mut w = Self::new(self.data[start..start + len].to_vec())?;
        if let Some(labels) = &self.labels {
            w.labels = Some(labels[start..start + len].to_vec());
        }
        Ok(w)
    }

    /// `sigma_0^2 = ||Y||_F^2 / (n p q)`, the raw (uncentered) mean square.
    pub fn mean_square(&self) -> f64 {
        let total: f64 = self.data.iter().map(|y| y.norm_squared()).sum();
        total / (self.n() * self.p * self.q) as f64
    }
}

/// The scalar series `xi_t = w' vec(Y_t)` used to form `Sigma_{Y,xi}(k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSeries {
    pub xi: Vec<f64>,
    pub weights: Vec<f64>,
    /// Number of principal directions averaged into `weights` (unit length).
    pub components: usize,
}

impl ProjectionSeries {
    /// Projection with caller-supplied weights.
    pub fn from_weights(series: &MatrixSeries, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != series.p() * series.q() {
            return Err(Error::Shape(format!(
                "weights have length {}, expected {}",
                weights.len(),
                series.p() * series.q()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidInput("weights must be finite".into()));
        }
        let xi = series
            .observations()
            .iter()
            .map(|y| y.as_slice().iter().zip(&weights).map(|(a, b)| a * b).sum())
            .collect();
        Ok(Self { xi, weights, components: 0 })
    }
}

/// Averages the leading principal directions of the column-centered data
/// matrix, taking as many as needed to reach [`XI_VARIATION_SHARE`] of the
/// total variation, and projects every observation on the unit vector along
/// that average.
pub fn build_xi(series: &MatrixSeries) -> Result<ProjectionSeries> {
    let centered = CenteredSeries::new(series);
    let yc = &centered.yc;
    let total = yc.norm_squared();
    let raw: f64 = series.observations().iter().map(|y| y.norm_squared()).sum();
    if !(total > 1e-24 * raw) || total == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let (n, width) = yc.shape();

    // Leading right singular directions of yc, via whichever Gram matrix is smaller.
    let (eigvals, directions) = if n <= width {
        let gram = yc * yc.transpose();
        let (vals, left) = linalg::sym_eigen_desc(&gram);
        let mut dirs = yc.tr_mul(&left);
        for (j, mut col) in dirs.column_iter_mut().enumerate() {
            let s = vals[j].max(0.0).sqrt();
            if s > 0.0 {
                col /= s;
            }
        }
        linalg::fix_column_signs(&mut dirs);
        (vals, dirs)
    } else {
        linalg::sym_eigen_desc(&yc.tr_mul(yc))
    };

    let target = XI_VARIATION_SHARE * total;
    let mut acc = 0.0;
    let mut components = eigvals.len();
    for (j, v) in eigvals.iter().enumerate() {
        acc += v.max(0.0);
        if acc >= target * (1.0 - 1e-12) {
            components = j + 1;
            break;
        }
    }
    let mut omega = DVector::zeros(width);
    for j in 0..components {
        omega += directions.column(j);
    }
    // Only the direction of the average matters for the model; unit length
    // keeps xi on the scale of Y, which the threshold levels assume.
    let norm = omega.norm();
    if norm > 0.0 {
        omega /= norm;
    } else {
        omega = directions.column(0).into_owned();
    }

    let mut proj = ProjectionSeries::from_weights(series, omega.as_slice().to_vec())?;
    proj.components = components;
    Ok(proj)
}

/// Hard-thresholding operator: zero every entry with `|s_ij| < delta`.
pub fn threshold(s: &DMatrix<f64>, delta: f64) -> DMatrix<f64> {
    let mut out = s.clone();
    threshold_in_place(&mut out, delta);
    out
}

pub fn threshold_in_place(s: &mut DMatrix<f64>, delta: f64) {
    if delta <= 0.0 {
        return;
    }
    for v in s.iter_mut() {
        if v.abs() < delta {
            *v = 0.0;
        }
    }
}

fn check_lag(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidInput("lag must be at least 1".into()));
    }
    if k + 2 > n {
        return Err(Error::InsufficientLag { lag: k, n, needed: k + 2 });
    }
    Ok(())
}

/// The series centered at its full-sample mean, kept as an `n x pq` matrix so
/// many lags can be evaluated without recentering.
#[derive(Debug, Clone)]
pub struct CenteredSeries {
    pub(crate) yc: DMatrix<f64>,
    p: usize,
    q: usize,
}

impl CenteredSeries {
    pub fn new(series: &MatrixSeries) -> Self {
        let mut yc = series.data_matrix();
        let n = yc.nrows() as f64;
        for mut col in yc.column_iter_mut() {
            let mean = col.sum() / n;
            col.add_scalar_mut(-mean);
        }
        Self { yc, p: series.p(), q: series.q() }
    }

    pub fn n(&self) -> usize {
        self.yc.nrows()
    }

    /// `(n-k)^{-1} sum_{t>k} (Y_t - Ybar)(xi_{t-k} - xibar)` as a `p x q` matrix.
    pub fn cross_xi(&self, xi_centered: &DVector<f64>, k: usize) -> Result<DMatrix<f64>> {
        let n = self.n();
        check_lag(n, k)?;
        let lead = self.yc.rows(k, n - k);
        let lag = xi_centered.rows(0, n - k);
        let v = lead.tr_mul(&lag) / (n - k) as f64;
        Ok(DMatrix::from_column_slice(self.p, self.q, v.as_slice()))
    }

    /// `(n-k)^{-1} sum_{t>k} (vec Y_t - mean)(vec Y_{t-k} - mean)'`.
    pub fn autocov(&self, k: usize) -> Result<DMatrix<f64>> {
        let n = self.n();
        check_lag(n, k)?;
        let lead = self.yc.rows(k, n - k);
        let lag = self.yc.rows(0, n - k);
        Ok(lead.tr_mul(&lag) / (n - k) as f64)
    }
}

pub(crate) fn centered_xi(xi: &ProjectionSeries) -> DVector<f64> {
    let n = xi.xi.len() as f64;
    let mean = xi.xi.iter().sum::<f64>() / n;
    DVector::from_iterator(xi.xi.len(), xi.xi.iter().map(|v| v - mean))
}

/// Sample lag-`k` cross-covariance between `Y_t` and `xi_{t-k}`.
pub fn lagcov_y_xi(series: &MatrixSeries, xi: &ProjectionSeries, k: usize) -> Result<DMatrix<f64>> {
    if xi.xi.len() != series.n() {
        return Err(Error::Shape(format!(
            "projection has length {}, series has {} observations",
            xi.xi.len(),
            series.n()
        )));
    }
    check_lag(series.n(), k)?;
    CenteredSeries::new(series).cross_xi(&centered_xi(xi), k)
}

/// Sample lag-`k` autocovariance of `vec(Y_t)`, a `pq x pq` matrix.
pub fn lagcov_vec_y(series: &MatrixSeries, k: usize) -> Result<DMatrix<f64>> {
    check_lag(series.n(), k)?;
    CenteredSeries::new(series).autocov(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_series(n: usize, p: usize, q: usize, seed: u64) -> MatrixSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n)
            .map(|_| DMatrix::from_fn(p, q, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        MatrixSeries::new(data).unwrap()
    }

    #[test]
    fn vec_convention_is_column_major() {
        // h_{i,j} (1-based) sits at (j-1) m1 + i.
        let h = DMatrix::from_row_slice(2, 3, &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
        assert_eq!(h.as_slice(), &[11.0, 21.0, 12.0, 22.0, 13.0, 23.0]);
        let s = MatrixSeries::new(vec![h.clone(), h.clone()]).unwrap();
        assert_eq!(s.data_matrix().row(0).iter().copied().collect::<Vec<_>>(), h.as_slice());
    }

    #[test]
    fn rejects_bad_input() {
        let one = vec![DMatrix::zeros(2, 2)];
        assert!(MatrixSeries::new(one).is_err());
        let mut bad = DMatrix::zeros(2, 2);
        bad[(1, 0)] = f64::NAN;
        let err = MatrixSeries::new(vec![DMatrix::zeros(2, 2), bad]).unwrap_err();
        assert_eq!(err, Error::NonFinite { time: 1, row: 1, col: 0 });
        let mixed = vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 3)];
        assert!(matches!(MatrixSeries::new(mixed), Err(Error::Shape(_))));
    }

    #[test]
    fn threshold_examples() {
        let s = DMatrix::from_row_slice(2, 2, &[0.6, 0.3, -0.7, 0.4]);
        assert_eq!(threshold(&s, 0.5), DMatrix::from_row_slice(2, 2, &[0.6, 0.0, -0.7, 0.0]));
        assert_eq!(threshold(&s, 0.0), s);
        let edge = DMatrix::from_row_slice(1, 2, &[0.5, -0.5]);
        assert_eq!(threshold(&edge, 0.5), edge);
    }

    #[test]
    fn xi_rejects_constant_series() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.1, 0.3]);
        let s = MatrixSeries::new(vec![c.clone(); 7]).unwrap();
        assert_eq!(build_xi(&s).unwrap_err(), Error::ZeroVariance);
    }

    #[test]
    fn xi_on_rank_one_series_tracks_factor() {
        let a = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let b = DVector::from_vec(vec![0.3, 1.0]);
        let x: Vec<f64> = (0..40).map(|t| (t as f64 * 0.7).sin() + 0.1 * t as f64).collect();
        let data = x.iter().map(|&xt| &a * b.transpose() * xt).collect();
        let s = MatrixSeries::new(data).unwrap();
        let proj = build_xi(&s).unwrap();
        assert_eq!(proj.components, 1);
        let ratio = proj.xi[3] / x[3];
        for (xi, xt) in proj.xi.iter().zip(&x) {
            assert!((xi - ratio * xt).abs() < 1e-10 * ratio.abs().max(1.0));
        }
    }

    #[test]
    fn xi_is_reproducible_and_reconstructs() {
        let s = random_series(30, 3, 4, 11);
        let a = build_xi(&s).unwrap();
        let b = build_xi(&s).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        for (t, y) in s.observations().iter().enumerate() {
            let direct: f64 = y.as_slice().iter().zip(&a.weights).map(|(u, w)| u * w).sum();
            assert!((direct - a.xi[t]).abs() <= 1e-12);
        }
        // n > pq goes through the covariance branch instead of the Gram branch.
        let tall = random_series(40, 2, 2, 5);
        let proj = build_xi(&tall).unwrap();
        assert!(proj.components >= 1 && proj.components <= 4);
    }

    #[test]
    fn lagcov_hand_example() {
        let data = (1..=3).map(|v| DMatrix::from_element(1, 1, v as f64)).collect();
        let s = MatrixSeries::new(data).unwrap();
        let xi = ProjectionSeries::from_weights(&s, vec![1.0]).unwrap();
        assert_eq!(xi.xi, vec![1.0, 2.0, 3.0]);
        let c = lagcov_y_xi(&s, &xi, 1).unwrap();
        assert_eq!(c[(0, 0)], 0.0);
        assert!(matches!(lagcov_y_xi(&s, &xi, 2), Err(Error::InsufficientLag { .. })));
    }

    #[test]
    fn lagcov_zero_on_constant_series() {
        let c = DMatrix::from_row_slice(2, 2, &[1.5, -2.0, 0.25, 3.0]);
        let s = MatrixSeries::new(vec![c; 6]).unwrap();
        let xi = ProjectionSeries::from_weights(&s, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        for k in 1..=4 {
            assert_eq!(lagcov_y_xi(&s, &xi, k).unwrap().amax(), 0.0);
            assert_eq!(lagcov_vec_y(&s, k).unwrap().amax(), 0.0);
        }
    }

    #[test]
    fn scalar_autocovariance_oracle() {
        let xs = [1.0, 3.0, 2.0, 5.0, 4.0];
        let data = xs.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect();
        let s = MatrixSeries::new(data).unwrap();
        // mean 3; lag 1 products: (3-3)(1-3) + (2-3)(3-3) + (5-3)(2-3) + (4-3)(5-3) = 0 + 0 - 2 + 2 = 0
        // lag 2 products: (2-3)(1-3) + (5-3)(3-3) + (4-3)(2-3) = 2 + 0 - 1 = 1 -> 1/3
        assert!(lagcov_vec_y(&s, 1).unwrap()[(0, 0)].abs() < 1e-15);
        assert!((lagcov_vec_y(&s, 2).unwrap()[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn reversal_transposes_autocovariance() {
        let s = random_series(6, 2, 2, 21);
        let rev = MatrixSeries::new(s.observations().iter().rev().cloned().collect()).unwrap();
        for k in 1..=3 {
            let fwd = lagcov_vec_y(&s, k).unwrap();
            let bwd = lagcov_vec_y(&rev, k).unwrap();
            assert!((fwd.transpose() - bwd).amax() < 1e-14);
        }
        // A palindromic series equals its reversal, so its autocovariances are symmetric.
        let half = random_series(3, 2, 2, 22);
        let mut obs = half.observations().to_vec();
        obs.extend(half.observations().iter().rev().cloned());
        let pal = MatrixSeries::new(obs).unwrap();
        for k in 1..=4 {
            let c = lagcov_vec_y(&pal, k).unwrap();
            assert!((&c - c.transpose()).amax() < 1e-14);
        }
    }

    #[test]
    fn vec_autocov_matches_entrywise_scalar_covariances() {
        let s = random_series(8, 2, 2, 9);
        let n = s.n();
        for k in 1..=3 {
            let direct = lagcov_vec_y(&s, k).unwrap();
            for a in 0..4 {
                for b in 0..4 {
                    let xa: Vec<f64> = (0..n).map(|t| s.get(t).as_slice()[a]).collect();
                    let xb: Vec<f64> = (0..n).map(|t| s.get(t).as_slice()[b]).collect();
                    let ma = xa.iter().sum::<f64>() / n as f64;
                    let mb = xb.iter().sum::<f64>() / n as f64;
                    let brute: f64 = (k..n).map(|t| (xa[t] - ma) * (xb[t - k] - mb)).sum::<f64>()
                        / (n - k) as f64;
                    assert!((direct[(a, b)] - brute).abs() < 1e-14);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn threshold_is_idempotent(vals in proptest::collection::vec(-2.0f64..2.0, 9), delta in 0.0f64..1.5) {
            let s = DMatrix::from_vec(3, 3, vals);
            let once = threshold(&s, delta);
            prop_assert_eq!(threshold(&once, delta), once);
        }

        #[test]
        fn lagcov_is_linear(seed in 0u64..500, alpha in -3.0f64..3.0) {
            let s = random_series(7, 2, 2, seed);
            let scaled = MatrixSeries::new(s.observations().iter().map(|y| y * alpha).collect()).unwrap();
            let base = lagcov_vec_y(&s, 2).unwrap();
            let other = lagcov_vec_y(&scaled, 2).unwrap();
            prop_assert!((base * (alpha * alpha) - other).amax() < 1e-12);
        }
    }
}
