//! The rank-one characterization tensor `Psi`, the matrix `Omega` whose
//! null space encodes the rotation `Theta`, and the conditioning of the
//! joint-diagonalization inputs built from that null space.
//!
//! For matrices `D`, `F` of equal shape, `Psi(D, F)` has entries
//!
//! ```text
//! d_{ik} f_{jl} + d_{jl} f_{ik} - d_{il} f_{jk} - d_{jk} f_{il}
//! ```
//!
//! and a nonzero `D` has rank one exactly when `Psi(D, D) = 0`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;

/// Draw budget for the random combination in [`select_phi`].
/// Upper bound on the number of entries of `Omega`.
pub const MAX_OMEGA_ENTRIES: usize = 1 << 25;
pub const PHI_RETRIES: usize = 64;

/// Four-way tensor of dimensions `(m1, m1, m2, m2)`, stored so that entry
/// `(i, j, k, l)` (0-based) sits at `((i m1 + j) m2 + k) m2 + l`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiTensor {
    m1: usize,
    m2: usize,
    values: Vec<f64>,
}

impl PsiTensor {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.m1, self.m1, self.m2, self.m2)
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        ((i * self.m1 + j) * self.m2 + k) * self.m2 + l
    }

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.values[self.offset(i, j, k, l)]
    }

    /// `vec(Psi)`, last index fastest.
    pub fn as_vec(&self) -> &[f64] {
        &self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn psi_into(d: &DMatrix<f64>, f: &DMatrix<f64>, out: &mut [f64]) {
    let (m1, m2) = d.shape();
    let mut idx = 0;
    for i in 0..m1 {
        for j in 0..m1 {
            for k in 0..m2 {
                for l in 0..m2 {
                    // Grouped so the antisymmetries hold bit for bit.
                    let pos = d[(i, k)] * f[(j, l)] + d[(j, l)] * f[(i, k)];
                    let neg = d[(i, l)] * f[(j, k)] + d[(j, k)] * f[(i, l)];
                    out[idx] = pos - neg;
                    idx += 1;
                }
            }
        }
    }
}

pub fn psi(d: &DMatrix<f64>, f: &DMatrix<f64>) -> Result<PsiTensor> {
    if d.shape() != f.shape() {
        return Err(Error::Shape(format!(
            "Psi arguments are {}x{} and {}x{}",
            d.nrows(),
            d.ncols(),
            f.nrows(),
            f.ncols()
        )));
    }
    let (m1, m2) = d.shape();
    let mut values = vec![0.0; m1 * m1 * m2 * m2];
    psi_into(d, f, &mut values);
    Ok(PsiTensor { m1, m2, values })
}

/// Number of unordered index pairs `i <= j` over `d` indices.
pub fn pair_count(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Inverse of [`pair_count`]; `None` when `len` is not triangular.
pub fn order_from_pair_count(len: usize) -> Option<usize> {
    let mut d = 0;
    while pair_count(d) < len {
        d += 1;
    }
    (pair_count(d) == len && d > 0).then_some(d)
}

/// Columns `vec Psi(W_i, W_j)` for `i <= j` in the order
/// `(1,1), (1,2), ..., (1,d), (2,2), ..., (d,d)`.
pub fn build_omega(slices: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let d = slices.len();
    if d < 2 {
        return Err(Error::InvalidInput(format!("Omega needs at least 2 slices, got {d}")));
    }
    let (m1, m2) = slices[0].shape();
    if let Some(bad) = slices.iter().position(|s| s.shape() != (m1, m2)) {
        return Err(Error::Shape(format!("slice {bad} differs in shape from slice 0")));
    }
    let rows = m1 * m1 * m2 * m2;
    if rows.saturating_mul(pair_count(d)) > MAX_OMEGA_ENTRIES {
        return Err(Error::InvalidInput(format!(
            "Omega would be {rows} x {} for slices of size {m1}x{m2}; ranks this large are not supported",
            pair_count(d)
        )));
    }
    let mut omega = DMatrix::zeros(rows, pair_count(d));
    let mut col = 0;
    for i in 0..d {
        for j in i..d {
            psi_into(&slices[i], &slices[j], omega.column_mut(col).as_mut_slice());
            col += 1;
        }
    }
    Ok(omega)
}

/// Basis of the (approximate) null space of `Omega`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBasis {
    /// `d(d+1)/2 x d`, one basis vector per column.
    pub hs: DMatrix<f64>,
    /// The `d` smallest singular values of `Omega`, ascending, matching `hs`.
    pub singvals: Vec<f64>,
    /// All singular values of `Omega`, descending.
    pub spectrum: Vec<f64>,
    /// Set when `Omega` vanished and the canonical basis was returned.
    pub degenerate: bool,
    pub rotation: Option<DMatrix<f64>>,
}

impl KernelBasis {
    pub fn rotated(&self) -> bool {
        self.rotation.is_some()
    }
}

/// Right singular vectors of `Omega` for its `d` smallest singular values.
pub fn kernel_basis(omega: &DMatrix<f64>, d: usize) -> Result<KernelBasis> {
    let cols = omega.ncols();
    if cols != pair_count(d) {
        return Err(Error::Shape(format!(
            "Omega has {cols} columns, expected {} for d = {d}",
            pair_count(d)
        )));
    }
    if omega.amax() == 0.0 {
        return Ok(KernelBasis {
            hs: DMatrix::identity(cols, d),
            singvals: vec![0.0; d],
            spectrum: vec![0.0; cols],
            degenerate: true,
            rotation: None,
        });
    }
    let (sv, v) = linalg::svd_right_desc(omega)?;
    let mut hs = DMatrix::zeros(cols, d);
    let mut singvals = Vec::with_capacity(d);
    for m in 0..d {
        let src = cols - 1 - m;
        hs.set_column(m, &v.column(src));
        singvals.push(sv[src]);
    }
    linalg::fix_column_signs(&mut hs);
    Ok(KernelBasis {
        hs,
        singvals,
        spectrum: sv.iter().copied().collect(),
        degenerate: false,
        rotation: None,
    })
}

/// Symmetric `d x d` matrix with `h_{ii}` on the diagonal and `h_{ij} / 2`
/// in both off-diagonal positions.
pub fn h_matrix(h: &[f64]) -> Result<DMatrix<f64>> {
    let d = order_from_pair_count(h.len())
        .ok_or_else(|| Error::Shape(format!("length {} is not d(d+1)/2", h.len())))?;
    let mut m = DMatrix::zeros(d, d);
    let mut idx = 0;
    for i in 0..d {
        for j in i..d {
            if i == j {
                m[(i, i)] = h[idx];
            } else {
                m[(i, j)] = h[idx] / 2.0;
                m[(j, i)] = h[idx] / 2.0;
            }
            idx += 1;
        }
    }
    Ok(m)
}

/// Inverse of [`h_matrix`]: upper triangle row by row, off-diagonals doubled.
pub fn h_vector(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut h = Vec::with_capacity(pair_count(d));
    for i in 0..d {
        for j in i..d {
            h.push(if i == j { m[(i, i)] } else { m[(i, j)] + m[(j, i)] });
        }
    }
    h
}

/// One symmetric matrix per basis vector (column of `hs`).
pub fn build_h(hs: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
    hs.column_iter()
        .map(|c| h_matrix(c.clone_owned().as_slice()))
        .collect()
}

fn invertibility_floor(hset: &[DMatrix<f64>]) -> f64 {
    let scale = hset
        .iter()
        .map(|h| linalg::singular_values_desc(h)[0])
        .fold(0.0, f64::max);
    1e-12 * scale.max(f64::MIN_POSITIVE)
}

/// Picks `phi` so that `sum_i phi_i H_i` is invertible: the member with the
/// largest smallest-singular-value when that value is positive (lowest index
/// on ties), otherwise seeded random unit vectors.
pub fn select_phi<R: Rng>(hset: &[DMatrix<f64>], rng: &mut R) -> Result<DVector<f64>> {
    if hset.is_empty() {
        return Err(Error::InvalidInput("empty H set".into()));
    }
    let d = hset.len();
    let floor = invertibility_floor(hset);
    let sigmas: Vec<f64> = hset.iter().map(linalg::min_singular_value).collect();
    let mut best = 0;
    for (i, s) in sigmas.iter().enumerate() {
        if *s > sigmas[best] {
            best = i;
        }
    }
    if sigmas[best] > floor {
        let mut phi = DVector::zeros(d);
        phi[best] = 1.0;
        return Ok(phi);
    }
    for _ in 0..PHI_RETRIES {
        let mut phi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = phi.norm();
        if norm == 0.0 {
            continue;
        }
        phi /= norm;
        if linalg::min_singular_value(&combine(hset, &phi)) > floor {
            return Ok(phi);
        }
    }
    Err(Error::NoInvertibleCombination(PHI_RETRIES))
}

pub fn combine(hset: &[DMatrix<f64>], phi: &DVector<f64>) -> DMatrix<f64> {
    let d = hset[0].nrows();
    hset.iter()
        .zip(phi.iter())
        .fold(DMatrix::zeros(d, d), |acc, (h, w)| acc + h * *w)
}

fn stack_vec(mats: impl Iterator<Item = DMatrix<f64>>, d: usize, count: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(d * d, count);
    for (c, m) in mats.enumerate() {
        out.column_mut(c).copy_from_slice(m.as_slice());
    }
    out
}

/// The conditioning rotation
///
/// ```text
/// Pi = { 2 (U0' U2) (U1' U2 + U2' U1)^{-1} (U2' U0) }^{-1/2}
/// ```
///
/// with `U0 = (vec H_i)`, `U1 = (vec H^{-1} H_i)`, `U2 = (vec H_i H^{-1})`
/// and `H = sum_i phi_i H_i`. Returns the basis `hs Pi`.
pub fn rotate_basis(
    basis: &KernelBasis,
    hset: &[DMatrix<f64>],
    phi: &DVector<f64>,
) -> Result<KernelBasis> {
    let d = hset.len();
    if d == 0 || basis.hs.ncols() != d || phi.len() != d {
        return Err(Error::Shape("basis, H set and phi disagree in size".into()));
    }
    let h = combine(hset, phi);
    let h_inv = h
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::RotationIllConditioned("combined H is singular".into()))?;
    let u0 = stack_vec(hset.iter().cloned(), d, d);
    let u1 = stack_vec(hset.iter().map(|hi| &h_inv * hi), d, d);
    let u2 = stack_vec(hset.iter().map(|hi| hi * &h_inv), d, d);
    let mid = u1.tr_mul(&u2) + u2.tr_mul(&u1);
    let mid_inv = linalg::symmetrize(&mid)
        .try_inverse()
        .ok_or_else(|| Error::RotationIllConditioned("U1'U2 + U2'U1 is singular".into()))?;
    let arg = (u0.tr_mul(&u2) * mid_inv * u2.tr_mul(&u0)) * 2.0;
    if !arg.iter().all(|v| v.is_finite()) {
        return Err(Error::RotationIllConditioned("non-finite rotation argument".into()));
    }
    let pi = linalg::inv_sqrt_spd(&arg, 1e-10)?;
    Ok(KernelBasis {
        hs: &basis.hs * &pi,
        singvals: basis.singvals.clone(),
        spectrum: basis.spectrum.clone(),
        degenerate: basis.degenerate,
        rotation: Some(pi),
    })
}

/// Largest dimension `Omega`'s column space can have for `d1 x d2` slices:
/// `Psi` lives in the tensor product of the antisymmetric squares, of
/// dimension `C(d1, 2) C(d2, 2)`.
pub fn omega_rank_ceiling(d1: usize, d2: usize) -> usize {
    (d1 * d1.saturating_sub(1) / 2) * (d2 * d2.saturating_sub(1) / 2)
}

/// Whether `rank(Omega) = d(d-1)/2` is attainable at all for the given ranks.
pub fn structurally_identifiable(d1: usize, d2: usize, d: usize) -> bool {
    d < 2 || omega_rank_ceiling(d1, d2) >= d * (d - 1) / 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn identity_example() {
        let i2 = DMatrix::identity(2, 2);
        let t = psi(&i2, &i2).unwrap();
        assert_eq!(t.get(0, 1, 0, 1), 2.0);
        assert_eq!(t.get(0, 1, 1, 0), -2.0);
        for k in 0..2 {
            for l in 0..2 {
                assert_eq!(t.get(0, 0, k, l), 0.0);
                assert_eq!(t.get(1, 1, k, l), 0.0);
            }
        }
        let e11 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(psi(&e11, &e11).unwrap().max_abs(), 0.0);
        assert!(psi(&i2, &DMatrix::identity(2, 3)).is_err());
    }

    #[test]
    fn rank_two_matrix_has_nonzero_psi() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_matrix(3, 2, &mut rng);
        let t = psi(&d, &d).unwrap();
        // brute-force one entry: i=0, j=1, k=0, l=1 -> 2 (d00 d11 - d01 d10)
        let brute = 2.0 * (d[(0, 0)] * d[(1, 1)] - d[(0, 1)] * d[(1, 0)]);
        assert!((t.get(0, 1, 0, 1) - brute).abs() < 1e-14);
        assert!(brute.abs() > 1e-8);
    }

    #[test]
    fn symmetries_hold_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let d = random_matrix(3, 4, &mut rng);
            let f = random_matrix(3, 4, &mut rng);
            let t = psi(&d, &f).unwrap();
            let u = psi(&f, &d).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..4 {
                        for l in 0..4 {
                            let v = t.get(i, j, k, l);
                            assert_eq!(t.get(j, i, k, l), -v);
                            assert_eq!(t.get(i, j, l, k), -v);
                            assert_eq!(t.get(j, i, l, k), v);
                            assert_eq!(u.get(i, j, k, l), v);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn omega_layout_and_zero_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let slices: Vec<_> = (0..3).map(|_| random_matrix(2, 3, &mut rng)).collect();
        let omega = build_omega(&slices).unwrap();
        assert_eq!(omega.shape(), (4 * 9, 6));
        let expected = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
        for (c, (i, j)) in expected.iter().enumerate() {
            let t = psi(&slices[*i], &slices[*j]).unwrap();
            assert_eq!(omega.column(c).as_slice(), t.as_vec());
        }
        let zeros = vec![DMatrix::zeros(2, 2); 3];
        assert_eq!(build_omega(&zeros).unwrap().amax(), 0.0);
        assert!(build_omega(&slices[..1]).is_err());
        let big = vec![DMatrix::zeros(50, 50); 4];
        assert!(matches!(build_omega(&big), Err(Error::InvalidInput(_))));
        let kb = kernel_basis(&build_omega(&zeros).unwrap(), 3).unwrap();
        assert!(kb.degenerate);
        assert_eq!(kb.hs, DMatrix::identity(6, 3));
    }

    #[test]
    fn two_rank_one_slices_give_two_dimensional_kernel() {
        // W_1 = C_1 + C_2, W_2 = C_1 - C_2 with C_l rank one and Psi(C_1, C_2) != 0
        let c1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let c2 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let w = vec![&c1 + &c2, &c1 - &c2];
        let omega = build_omega(&w).unwrap();
        let sv = linalg::singular_values_desc(&omega);
        assert!(sv[0] > 1.0);
        assert!(sv[1] < 1e-12 && sv[2] < 1e-12);
        let kb = kernel_basis(&omega, 2).unwrap();
        assert!(kb.singvals.iter().all(|s| *s < 1e-12));
        assert!((&omega * &kb.hs).amax() < 1e-12);
    }

    #[test]
    fn h_matrix_halving_rule() {
        let h = h_matrix(&[1.0, 4.0, 9.0]).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 9.0]));
        assert_eq!(h_vector(&h), vec![1.0, 4.0, 9.0]);
        assert_eq!(h_matrix(&[0.0; 6]).unwrap(), DMatrix::zeros(3, 3));
        assert!(h_matrix(&[1.0, 2.0]).is_err());
        let v = vec![0.5, -1.0, 2.0, 3.0, 0.25, -4.0];
        assert_eq!(h_vector(&h_matrix(&v).unwrap()), v);
    }

    #[test]
    fn phi_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h1 = DMatrix::identity(2, 2);
        let h2 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(select_phi(&[h1.clone(), h2.clone()], &mut rng).unwrap().as_slice(), &[1.0, 0.0]);
        // ties keep the lowest index
        assert_eq!(select_phi(&[h2.clone(), h1.clone(), h1.clone()], &mut rng).unwrap().as_slice(), &[0.0, 1.0, 0.0]);

        // both singular, a combination is invertible
        let h3 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let set = [h2.clone(), h3.clone()];
        let a = select_phi(&set, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = select_phi(&set, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert!(linalg::min_singular_value(&combine(&set, &a)) > 0.0);

        let dead = [h2.clone(), h2.clone() * 2.0];
        assert_eq!(select_phi(&dead, &mut rng).unwrap_err(), Error::NoInvertibleCombination(PHI_RETRIES));
    }

    #[test]
    fn rotation_fixed_point() {
        // Theta = I and diagonal H_i whose diagonals are orthonormal columns.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = linalg::random_orthogonal(3, &mut rng);
        let hset: Vec<_> = (0..3)
            .map(|m| DMatrix::from_diagonal(&g.column(m).into_owned()))
            .collect();
        let hs = DMatrix::from_columns(&hset.iter().map(|h| DVector::from_vec(h_vector(h))).collect::<Vec<_>>());
        let basis = KernelBasis { hs, singvals: vec![0.0; 3], spectrum: vec![], degenerate: false, rotation: None };
        let phi = select_phi(&hset, &mut rng).unwrap();
        let rotated = rotate_basis(&basis, &hset, &phi).unwrap();
        let pi = rotated.rotation.unwrap();
        assert!((pi - DMatrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn rotation_matches_dense_solve_oracle() {
        // d = 2: evaluate the formula with explicit 4x4 systems and a 2x2
        // closed-form inverse square root.
        let h1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let h2 = DMatrix::from_row_slice(2, 2, &[-0.5, 1.0, 1.0, 0.7]);
        let hset = vec![h1.clone(), h2.clone()];
        let hs = DMatrix::from_columns(&[DVector::from_vec(h_vector(&h1)), DVector::from_vec(h_vector(&h2))]);
        let basis = KernelBasis { hs: hs.clone(), singvals: vec![0.0; 2], spectrum: vec![], degenerate: false, rotation: None };
        let phi = DVector::from_vec(vec![1.0, 0.0]);
        let rotated = rotate_basis(&basis, &hset, &phi).unwrap();

        // H^{-1} H_i via LU solves on the 4x4 Kronecker systems (I ⊗ H) x = vec(H_i)
        // and (H' ⊗ I) y = vec(H_i).
        let h = &h1;
        let i2 = DMatrix::<f64>::identity(2, 2);
        let left = i2.kronecker(h);
        let right = h.transpose().kronecker(&i2);
        let mut u0 = DMatrix::zeros(4, 2);
        let mut u1 = DMatrix::zeros(4, 2);
        let mut u2 = DMatrix::zeros(4, 2);
        for (c, hi) in hset.iter().enumerate() {
            let v = DVector::from_column_slice(hi.as_slice());
            u0.set_column(c, &v);
            u1.set_column(c, &left.clone().lu().solve(&v).unwrap());
            u2.set_column(c, &right.clone().lu().solve(&v).unwrap());
        }
        let mid = u1.transpose() * &u2 + u2.transpose() * &u1;
        let x = (u0.transpose() * &u2) * mid.lu().solve(&(u2.transpose() * &u0)).unwrap() * 2.0;
        let x = (&x + x.transpose()) * 0.5;
        // closed form: X^{-1/2} = (X + sqrt(det) I)^{-1} * sqrt(...) via sqrt of 2x2 SPD
        let det = x.determinant();
        let tr = x.trace();
        let s = det.sqrt();
        let t = (tr + 2.0 * s).sqrt();
        let sqrt_x = (&x + DMatrix::identity(2, 2) * s) / t;
        let pi = sqrt_x.try_inverse().unwrap();
        assert!((rotated.rotation.unwrap() - &pi).amax() < 1e-10);
        assert!((rotated.hs - hs * pi).amax() < 1e-10);
    }

    #[test]
    fn identifiability_ceiling() {
        assert!(structurally_identifiable(3, 3, 3));
        assert!(structurally_identifiable(2, 3, 3));
        assert!(!structurally_identifiable(2, 2, 3));
        assert!(!structurally_identifiable(2, 1, 2));
        assert!(structurally_identifiable(1, 1, 1));
    }
}
