//! Small dense helpers shared by the estimation modules.

use faer::{Mat, MatRef, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest absolute difference between `s` and its transpose.
pub(crate) fn max_asymmetry(s: &DMatrix<f64>) -> f64 {
    let n = s.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((s[(i, j)] - s[(j, i)]).abs());
        }
    }
    worst
}

pub(crate) fn symmetrize(s: &DMatrix<f64>) -> DMatrix<f64> {
    (s + s.transpose()) * 0.5
}

/// Checks squareness and symmetry up to `rel_tol * max(1, max|s_ij|)`.
pub(crate) fn check_symmetric(s: &DMatrix<f64>, rel_tol: f64) -> Result<()> {
    if s.nrows() != s.ncols() {
        return Err(Error::Shape(format!(
            "expected a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let scale = s.amax().max(1.0);
    let asym = max_asymmetry(s);
    if asym > rel_tol * scale {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Index of the entry with the largest magnitude; the first one wins ties.
pub(crate) fn dominant_index<'a>(values: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = 0;
    let mut best_abs = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v.abs() > best_abs {
            best_abs = v.abs();
            best = i;
        }
    }
    best
}

/// Flips the sign of each column so its largest-magnitude entry is positive.
pub(crate) fn fix_column_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let idx = dominant_index(col.iter());
        if col[idx] < 0.0 {
            col.neg_mut();
        }
    }
}

fn to_faer(m: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_faer(m: MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Full symmetric eigendecomposition with eigenvalues sorted in descending
/// order and sign-normalized eigenvectors. The input is symmetrized first.
pub(crate) fn sym_eigen_desc(s: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = s.nrows();
    let sym = symmetrize(s);
    let (raw_values, raw_vectors) = match to_faer(&sym).self_adjoint_eigen(Side::Lower) {
        Ok(eig) => {
            let vals: Vec<f64> = (0..n).map(|i| eig.S()[i]).collect();
            (vals, from_faer(eig.U()))
        }
        Err(_) => {
            let eig = nalgebra::SymmetricEigen::new(sym);
            (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| raw_values[b].total_cmp(&raw_values[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| raw_values[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &raw_vectors.column(src));
    }
    fix_column_signs(&mut vectors);
    (values, vectors)
}

/// Thin SVD `m = U diag(s) V'` with `s` descending (`min(r, c)` values).
pub(crate) fn thin_svd(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let svd = to_faer(m)
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("SVD failed: {e:?}")))?;
    let k = m.nrows().min(m.ncols());
    let s: Vec<f64> = (0..k).map(|i| svd.S()[i]).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let (u_raw, v_raw) = (svd.U(), svd.V());
    let u = DMatrix::from_fn(m.nrows(), k, |i, j| u_raw[(i, order[j])]);
    let v = DMatrix::from_fn(m.ncols(), k, |i, j| v_raw[(i, order[j])]);
    Ok((u, order.iter().map(|&i| s[i]).collect(), v))
}

/// Singular values in descending order together with the full set of right
/// singular vectors (as columns, `ncols x ncols`). Wide inputs get zero
/// singular values appended so that both parts have `ncols` entries.
pub(crate) fn svd_right_desc(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (r, c) = m.shape();
    let svd = to_faer(m)
        .svd()
        .map_err(|e| Error::Numerical(format!("SVD failed: {e:?}")))?;
    let k = r.min(c);
    let mut s: Vec<f64> = (0..k).map(|i| svd.S()[i]).collect();
    s.resize(c, 0.0);
    let mut order: Vec<usize> = (0..c).collect();
    // Stable sort keeps the padded null directions after the computed ones.
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let v_raw = svd.V();
    let v = DMatrix::from_fn(c, c, |i, j| v_raw[(i, order[j])]);
    Ok((DVector::from_iterator(c, order.iter().map(|&i| s[i])), v))
}

/// Singular values of `m`, descending.
pub(crate) fn singular_values_desc(m: &DMatrix<f64>) -> DVector<f64> {
    let mut sv: Vec<f64> = match to_faer(m).singular_values() {
        Ok(v) => v,
        Err(_) => m.singular_values().iter().copied().collect(),
    };
    sv.sort_by(|a, b| b.total_cmp(a));
    DVector::from_vec(sv)
}

pub(crate) fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    singular_values_desc(m).iter().copied().fold(f64::INFINITY, f64::min)
}

/// `S^{-1/2}` for a symmetric positive definite `S`. The argument is
/// symmetrized; every eigenvalue must exceed `rel_tol` times the largest.
pub(crate) fn inv_sqrt_spd(s: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    let (values, vectors) = sym_eigen_desc(s);
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(top > 0.0) || !top.is_finite() {
        return Err(Error::RotationIllConditioned(format!(
            "largest eigenvalue {top:e} is not positive"
        )));
    }
    let floor = rel_tol * top;
    if let Some(bad) = values.iter().find(|&&v| !(v > floor)) {
        return Err(Error::RotationIllConditioned(format!(
            "eigenvalue {bad:e} below {floor:e}"
        )));
    }
    let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |i, j| {
        vectors[(i, j)] / values[j].sqrt()
    });
    Ok(&scaled * vectors.transpose())
}

/// Moore-Penrose inverse through the SVD with a relative cutoff.
pub(crate) fn pseudo_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (u, s, v) = thin_svd(m)?;
    let top = s.first().copied().unwrap_or(0.0);
    let eps = top * 1e-12 * (m.nrows().max(m.ncols()) as f64);
    let mut vs = v;
    for (j, sj) in s.iter().enumerate() {
        let inv = if *sj > eps { 1.0 / sj } else { 0.0 };
        vs.column_mut(j).scale_mut(inv);
    }
    Ok(vs * u.transpose())
}

/// Orthonormal matrix of the requested size drawn from a QR of a Gaussian
/// matrix, with a sign fix so the result is Haar distributed.
pub(crate) fn random_orthogonal<R: rand::Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}
