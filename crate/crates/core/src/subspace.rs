//! The matrices `M1`, `M2` and `M`, their leading eigenspaces, and the
//! reduced series `Z_t = P' Y_t Q`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::series::{centered_xi, threshold_in_place, CenteredSeries, MatrixSeries, ProjectionSeries};

/// Orthonormal bases `P` (p x d1), `Q` (q x d2), `W` (d1 d2 x d) and the
/// spectra they were cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceSet {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub eigvals1: Vec<f64>,
    pub eigvals2: Vec<f64>,
    pub eigvals_m: Vec<f64>,
}

impl SubspaceSet {
    pub fn d1(&self) -> usize {
        self.p.ncols()
    }

    pub fn d2(&self) -> usize {
        self.q.ncols()
    }

    pub fn d(&self) -> usize {
        self.w.ncols()
    }
}

fn check_lags(n: usize, lags: usize, name: &str) -> Result<()> {
    if lags == 0 || lags + 2 > n {
        return Err(Error::InvalidInput(format!(
            "{name} = {lags} outside 1..={} for n = {n}",
            n.saturating_sub(2)
        )));
    }
    Ok(())
}

pub(crate) fn m1_m2_from(
    centered: &CenteredSeries,
    xi: &ProjectionSeries,
    lags: usize,
    delta1: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_lags(centered.n(), lags, "K")?;
    let xic = centered_xi(xi);
    let first = centered.cross_xi(&xic, 1)?;
    let (p, q) = first.shape();
    let mut m1 = DMatrix::zeros(p, p);
    let mut m2 = DMatrix::zeros(q, q);
    for k in 1..=lags {
        let mut s = if k == 1 { first.clone() } else { centered.cross_xi(&xic, k)? };
        threshold_in_place(&mut s, delta1);
        m1 += &s * s.transpose();
        m2 += s.tr_mul(&s);
    }
    Ok((linalg::symmetrize(&m1), linalg::symmetrize(&m2)))
}

/// `M1 = sum_k T(S_k) T(S_k)'` and `M2 = sum_k T(S_k)' T(S_k)` with
/// `S_k = Sigma_{Y,xi}(k)`, `k = 1..=lags`, and `T` the hard threshold at
/// `delta1`.
pub fn build_m1_m2(
    series: &MatrixSeries,
    xi: &ProjectionSeries,
    lags: usize,
    delta1: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if xi.xi.len() != series.n() {
        return Err(Error::Shape("projection length differs from series length".into()));
    }
    if delta1 < 0.0 {
        return Err(Error::InvalidInput(format!("delta1 must be >= 0, got {delta1}")));
    }
    m1_m2_from(&CenteredSeries::new(series), xi, lags, delta1)
}

/// Eigenvectors of the `k` largest eigenvalues of a symmetric matrix, each
/// column signed so its largest-magnitude entry is positive.
pub fn top_eigvecs(s: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    linalg::check_symmetric(s, 1e-8)?;
    if k == 0 || k > s.nrows() {
        return Err(Error::InvalidInput(format!("k = {k} outside 1..={}", s.nrows())));
    }
    let (vals, vecs) = linalg::sym_eigen_desc(s);
    Ok((vecs.columns(0, k).into_owned(), vals.iter().take(k).copied().collect()))
}

/// Full descending spectrum of a symmetric matrix.
pub fn spectrum(s: &DMatrix<f64>) -> Result<Vec<f64>> {
    linalg::check_symmetric(s, 1e-8)?;
    Ok(linalg::sym_eigen_desc(s).0.iter().copied().collect())
}

pub(crate) fn m_from(
    centered: &CenteredSeries,
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    lags: usize,
    delta2: f64,
) -> Result<DMatrix<f64>> {
    check_lags(centered.n(), lags, "Ktilde")?;
    let width = centered.yc.ncols();
    if p.nrows() * q.nrows() != width {
        return Err(Error::Shape(format!(
            "P ({} rows) and Q ({} rows) do not match pq = {width}",
            p.nrows(),
            q.nrows()
        )));
    }
    let proj = q.kronecker(p);
    let size = proj.ncols();
    let mut m = DMatrix::zeros(size, size);
    for k in 1..=lags {
        let mut sigma = centered.autocov(k)?;
        threshold_in_place(&mut sigma, delta2);
        let z = proj.tr_mul(&(&sigma * &proj));
        m += &z * z.transpose();
    }
    Ok(linalg::symmetrize(&m))
}

/// `M = sum_k S_k S_k'` with `S_k = (Q ⊗ P)' T(Sigma_vecY(k)) (Q ⊗ P)`; the
/// threshold acts on the full `pq x pq` autocovariance before projection.
pub fn build_m(
    series: &MatrixSeries,
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    lags: usize,
    delta2: f64,
) -> Result<DMatrix<f64>> {
    if p.nrows() != series.p() || q.nrows() != series.q() {
        return Err(Error::Shape(format!(
            "P is {}x{} and Q is {}x{} for a {}x{} series",
            p.nrows(),
            p.ncols(),
            q.nrows(),
            q.ncols(),
            series.p(),
            series.q()
        )));
    }
    if delta2 < 0.0 {
        return Err(Error::InvalidInput(format!("delta2 must be >= 0, got {delta2}")));
    }
    m_from(&CenteredSeries::new(series), p, q, lags, delta2)
}

/// `Z_t = P' Y_t Q` for every `t`.
pub fn reduce(series: &MatrixSeries, p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<MatrixSeries> {
    if p.nrows() != series.p() || q.nrows() != series.q() {
        return Err(Error::Shape(format!(
            "P has {} rows and Q has {} rows for a {}x{} series",
            p.nrows(),
            q.nrows(),
            series.p(),
            series.q()
        )));
    }
    let data = series.observations().iter().map(|y| p.tr_mul(y) * q).collect();
    MatrixSeries::new(data)
}
