//! The five-step estimator: ranks and subspaces from `M1`, `M2`; the factor
//! space from `M`; the rotation `Theta` from the null space of `Omega` via
//! joint diagonalization; rank-one extraction; and the final loadings.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jointdiag::{self, JointDiagInstance};
use crate::linalg;
use crate::psi::{self, KernelBasis};
use crate::rank::{self, RatioPath};
use crate::series::{self, CenteredSeries, MatrixSeries};
use crate::subspace;

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_K_TILDE: usize = 10;
/// Relative singular-value floor used to report the numerical rank of `Omega`.
pub const OMEGA_RANK_TOL: f64 = 1e-8;

/// A tuning constant that is either derived from the data or fixed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tuning {
    #[default]
    Auto,
    Value(f64),
}

impl Tuning {
    pub fn resolve(self, auto: f64) -> f64 {
        match self {
            Tuning::Auto => auto,
            Tuning::Value(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub k: usize,
    pub k_tilde: usize,
    pub delta1: Tuning,
    pub delta2: Tuning,
    pub c1: Tuning,
    pub c2: Tuning,
    pub c3: Tuning,
    pub seed: u64,
    /// Fixed `(d1, d2, d)`; the ratio paths are still computed and reported.
    pub pinned_ranks: Option<(usize, usize, usize)>,
    /// Apply the conditioning rotation before joint diagonalization.
    pub rotate: bool,
    pub jd_max_iter: usize,
    pub jd_tol: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            k_tilde: DEFAULT_K_TILDE,
            delta1: Tuning::Auto,
            delta2: Tuning::Auto,
            c1: Tuning::Auto,
            c2: Tuning::Auto,
            c3: Tuning::Auto,
            seed: 0,
            pinned_ranks: None,
            rotate: true,
            jd_max_iter: jointdiag::DEFAULT_MAX_ITER,
            jd_tol: jointdiag::DEFAULT_TOL,
        }
    }
}

/// The tuning constants actually used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTuning {
    pub k: usize,
    pub k_tilde: usize,
    pub delta1: f64,
    pub delta2: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub sigma0: f64,
}

impl EstimatorConfig {
    /// `delta = sigma0 sqrt(log(pq) / n)` when `pq >= n` and 0 otherwise;
    /// `c = sigma0 / n`.
    pub fn resolve(&self, series: &MatrixSeries) -> Result<ResolvedTuning> {
        let n = series.n();
        let pq = series.p() * series.q();
        let sigma0 = series.mean_square().sqrt();
        let auto_delta = if pq >= n {
            sigma0 * ((pq as f64).ln() / n as f64).sqrt()
        } else {
            0.0
        };
        let auto_c = sigma0 / n as f64;
        let t = ResolvedTuning {
            k: self.k,
            k_tilde: self.k_tilde,
            delta1: self.delta1.resolve(auto_delta),
            delta2: self.delta2.resolve(auto_delta),
            c1: self.c1.resolve(auto_c),
            c2: self.c2.resolve(auto_c),
            c3: self.c3.resolve(auto_c),
            sigma0,
        };
        for (name, v) in [("delta1", t.delta1), ("delta2", t.delta2)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be >= 0, got {v}")));
            }
        }
        for (name, v) in [("c1", t.c1), ("c2", t.c2), ("c3", t.c3)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be > 0, got {v}")));
            }
        }
        if t.k == 0 || t.k_tilde == 0 {
            return Err(Error::InvalidInput("K and Ktilde must be at least 1".into()));
        }
        let needed = t.k.max(t.k_tilde) + 2;
        if n < needed {
            return Err(Error::InsufficientLag { lag: t.k.max(t.k_tilde), n, needed });
        }
        Ok(t)
    }
}

/// Everything Step 3 produces besides `Theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    pub theta: DMatrix<f64>,
    pub omega_singular_values: Vec<f64>,
    pub kernel_singular_values: Vec<f64>,
    pub phi: Option<Vec<f64>>,
    pub rotated: bool,
    pub jd_objective: f64,
    pub jd_converged: bool,
    pub jd_iterations: usize,
    pub warnings: Vec<String>,
}

/// Loadings assembled from `(P, Q, W, Theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Loadings {
    pub c: Vec<DMatrix<f64>>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub rank1_ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub tuning: ResolvedTuning,
    pub xi_components: usize,
    pub ranks_pinned: bool,
    pub path_d1: RatioPath,
    pub path_d2: RatioPath,
    pub path_d: RatioPath,
    /// Whether Steps 3 ran (false when `d = 1`).
    pub identification_ran: bool,
    /// `C(d1,2) C(d2,2) >= d(d-1)/2`, necessary for `Omega` to have the
    /// rank that pins down `Theta`.
    pub structurally_identifiable: bool,
    pub omega_singular_values: Vec<f64>,
    pub omega_rank: usize,
    pub kernel_singular_values: Vec<f64>,
    pub phi: Option<Vec<f64>>,
    pub rotated: bool,
    pub jd_objective: f64,
    pub jd_converged: bool,
    pub jd_iterations: usize,
    pub rank1_ratios: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpEstimate {
    pub d1: usize,
    pub d2: usize,
    pub d: usize,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub c: Vec<DMatrix<f64>>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub diagnostics: Diagnostics,
}

impl CpEstimate {
    pub fn subspaces(&self) -> subspace::SubspaceSet {
        subspace::SubspaceSet {
            p: self.p.clone(),
            q: self.q.clone(),
            w: self.w.clone(),
            eigvals1: self.diagnostics.path_d1.eigenvalues.iter().take(self.d1).copied().collect(),
            eigvals2: self.diagnostics.path_d2.eigenvalues.iter().take(self.d2).copied().collect(),
            eigvals_m: self.diagnostics.path_d.eigenvalues.iter().take(self.d).copied().collect(),
        }
    }

    pub fn warnings(&self) -> &[String] {
        &self.diagnostics.warnings
    }
}

/// The `d` columns of `W` as `d1 x d2` matrices (column-major reshape).
pub fn w_slices(w: &DMatrix<f64>, d1: usize, d2: usize) -> Result<Vec<DMatrix<f64>>> {
    if w.nrows() != d1 * d2 {
        return Err(Error::Shape(format!("W has {} rows, expected {}", w.nrows(), d1 * d2)));
    }
    Ok(w.column_iter()
        .map(|c| DMatrix::from_column_slice(d1, d2, c.clone_owned().as_slice()))
        .collect())
}

/// Step 3 from the slices of `W`: `Omega`, its kernel, then
/// [`identify_from_basis`].
pub fn identify(
    slices: &[DMatrix<f64>],
    config: &EstimatorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Identification> {
    let d = slices.len();
    let omega = psi::build_omega(slices)?;
    let basis = psi::kernel_basis(&omega, d)?;
    let mut warnings = Vec::new();
    if basis.degenerate {
        warnings.push("Omega vanished; canonical kernel basis used".to_string());
    }
    let mut ident = identify_from_basis(&basis, config, rng)?;
    warnings.append(&mut ident.warnings);
    ident.warnings = warnings;
    Ok(ident)
}

/// Step 3 from a given kernel basis: `H` set, `phi`, rotation, joint
/// diagonalization. A rotation failure falls back to the unrotated basis
/// with a warning.
pub fn identify_from_basis(
    basis: &KernelBasis,
    config: &EstimatorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Identification> {
    let mut warnings = Vec::new();
    let hset = psi::build_h(&basis.hs)?;
    let mut phi_used = None;
    let mut working = basis.clone();
    if config.rotate {
        match psi::select_phi(&hset, rng) {
            Ok(phi) => {
                match psi::rotate_basis(basis, &hset, &phi) {
                    Ok(rotated) => working = rotated,
                    Err(e) => warnings.push(format!("{e}; proceeding unrotated")),
                }
                phi_used = Some(phi.iter().copied().collect());
            }
            Err(e) => warnings.push(format!("{e}; proceeding unrotated")),
        }
    }
    let hs = if working.rotated() { psi::build_h(&working.hs)? } else { hset };
    let instance = JointDiagInstance::new(hs)?.with_limits(config.jd_max_iter, config.jd_tol);
    let jd = jointdiag::ffdiag(&instance)?;
    if !jd.converged {
        warnings.push(format!(
            "joint diagonalization stopped after {} iterations without converging",
            jd.iterations
        ));
    }
    Ok(Identification {
        theta: jd.theta,
        omega_singular_values: basis.spectrum.clone(),
        kernel_singular_values: basis.singvals.clone(),
        phi: phi_used,
        rotated: working.rotated(),
        jd_objective: jd.objective,
        jd_converged: jd.converged,
        jd_iterations: jd.iterations,
        warnings,
    })
}

/// Leading singular pair of `c`, signed so that the dominant entry of `u`
/// is positive and `u' c v > 0`, plus `sigma_2 / sigma_1`.
pub fn rank1_extract(c: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>, f64)> {
    if c.nrows() == 0 || c.ncols() == 0 || c.amax() == 0.0 {
        return Err(Error::InvalidInput("rank-one extraction of a zero matrix".into()));
    }
    let (u_all, sv, _) = linalg::thin_svd(c)?;
    let s1 = sv[0];
    let s2 = sv.get(1).copied().unwrap_or(0.0);
    let mut u = u_all.column(0).into_owned();
    let idx = linalg::dominant_index(u.iter());
    if u[idx] < 0.0 {
        u.neg_mut();
    }
    let mut v = c.tr_mul(&u) / s1;
    let vn = v.norm();
    v /= vn;
    Ok((u, v, s2 / s1))
}

/// Steps 4 and 5: `C = W Theta`, rank-one pairs, `A = P U`, `B = Q V`.
pub fn assemble(
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    w: &DMatrix<f64>,
    theta: &DMatrix<f64>,
) -> Result<Loadings> {
    let (d1, d2) = (p.ncols(), q.ncols());
    let d = theta.ncols();
    if w.ncols() != theta.nrows() {
        return Err(Error::Shape("W and Theta do not conform".into()));
    }
    let cw = w * theta;
    let c = w_slices(&cw, d1, d2)?;
    let mut u = DMatrix::zeros(d1, d);
    let mut v = DMatrix::zeros(d2, d);
    let mut ratios = Vec::with_capacity(d);
    for (l, cl) in c.iter().enumerate() {
        let (ul, vl, r) = rank1_extract(cl)?;
        u.set_column(l, &ul);
        v.set_column(l, &vl);
        ratios.push(r);
    }
    let a = p * &u;
    let b = q * &v;
    Ok(Loadings { c, u, v, a, b, rank1_ratios: ratios })
}

/// Runs the whole estimator.
pub fn estimate(series: &MatrixSeries, config: &EstimatorConfig) -> Result<CpEstimate> {
    let tuning = config.resolve(series)?;
    let n = series.n();
    let mut warnings = Vec::new();
    if tuning.k > n / 4 || tuning.k_tilde > n / 4 {
        warnings.push(format!(
            "K = {} / Ktilde = {} exceed n/4 = {}; high lags are poorly estimated",
            tuning.k,
            tuning.k_tilde,
            n / 4
        ));
    }

    // Step 1.
    let xi = series::build_xi(series)?;
    let centered = CenteredSeries::new(series);
    let (m1, m2) = subspace::m1_m2_from(&centered, &xi, tuning.k, tuning.delta1)?;
    let (path1, path2) = rank::estimate_d12(&m1, &m2, tuning.c1, tuning.c2)?;
    let (d1, d2) = match config.pinned_ranks {
        Some((a, b, _)) => (a, b),
        None => (path1.rank, path2.rank),
    };
    if d1 == 0 || d2 == 0 || d1 > series.p() || d2 > series.q() {
        return Err(Error::InvalidInput(format!(
            "ranks ({d1}, {d2}) incompatible with a {}x{} series",
            series.p(),
            series.q()
        )));
    }
    let (p, _) = subspace::top_eigvecs(&m1, d1)?;
    let (q, _) = subspace::top_eigvecs(&m2, d2)?;

    // Step 2.
    let m = subspace::m_from(&centered, &p, &q, tuning.k_tilde, tuning.delta2)?;
    let path_d = rank::estimate_d(&m, tuning.c3, d1, d2)?;
    let d = match config.pinned_ranks {
        Some((_, _, d)) => d,
        None => path_d.rank,
    };
    if d == 0 || d > d1 * d2 {
        return Err(Error::InvalidInput(format!("d = {d} outside 1..={}", d1 * d2)));
    }
    let (w, _) = subspace::top_eigvecs(&m, d)?;

    // Step 3.
    let structurally_identifiable = psi::structurally_identifiable(d1, d2, d);
    let mut ident = None;
    let theta = if d >= 2 {
        if !structurally_identifiable {
            warnings.push(format!(
                "loadings not identifiable for (d1, d2, d) = ({d1}, {d2}, {d}): rank(Omega) cannot reach d(d-1)/2"
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let id = identify(&w_slices(&w, d1, d2)?, config, &mut rng)?;
        warnings.extend(id.warnings.iter().cloned());
        let theta = id.theta.clone();
        ident = Some(id);
        theta
    } else {
        DMatrix::identity(1, 1)
    };

    // Steps 4 and 5.
    let loadings = assemble(&p, &q, &w, &theta)?;

    let omega_sv = ident.as_ref().map(|i| i.omega_singular_values.clone()).unwrap_or_default();
    let omega_rank = match omega_sv.first() {
        Some(&top) if top > 0.0 => omega_sv.iter().filter(|&&s| s > OMEGA_RANK_TOL * top).count(),
        _ => 0,
    };
    let diagnostics = Diagnostics {
        tuning,
        xi_components: xi.components,
        ranks_pinned: config.pinned_ranks.is_some(),
        path_d1: path1,
        path_d2: path2,
        path_d,
        identification_ran: ident.is_some(),
        structurally_identifiable,
        omega_rank,
        omega_singular_values: omega_sv,
        kernel_singular_values: ident.as_ref().map(|i| i.kernel_singular_values.clone()).unwrap_or_default(),
        phi: ident.as_ref().and_then(|i| i.phi.clone()),
        rotated: ident.as_ref().is_some_and(|i| i.rotated),
        jd_objective: ident.as_ref().map_or(0.0, |i| i.jd_objective),
        jd_converged: ident.as_ref().is_none_or(|i| i.jd_converged),
        jd_iterations: ident.as_ref().map_or(0, |i| i.jd_iterations),
        rank1_ratios: loadings.rank1_ratios.clone(),
        warnings,
    };
    Ok(CpEstimate {
        d1,
        d2,
        d,
        p,
        q,
        w,
        theta,
        c: loadings.c,
        u: loadings.u,
        v: loadings.v,
        a: loadings.a,
        b: loadings.b,
        diagnostics,
    })
}

fn check_unit_columns(m: &DMatrix<f64>, name: &str) -> Result<()> {
    for (j, c) in m.column_iter().enumerate() {
        let dev = (c.norm() - 1.0).abs();
        if dev > 1e-8 {
            return Err(Error::InvalidInput(format!(
                "column {j} of {name} has norm deviating from 1 by {dev:e}"
            )));
        }
    }
    Ok(())
}

/// `max_l min_j (1 - (ahat_j' a_l)^2)`: for every true column, the squared
/// sine to its closest estimated column, maximized over true columns.
pub fn varpi(a: &DMatrix<f64>, ahat: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != ahat.nrows() {
        return Err(Error::Shape(format!(
            "loadings have {} and {} rows",
            a.nrows(),
            ahat.nrows()
        )));
    }
    if a.ncols() == 0 || ahat.ncols() == 0 {
        return Err(Error::InvalidInput("empty loading matrix".into()));
    }
    check_unit_columns(a, "A")?;
    check_unit_columns(ahat, "Ahat")?;
    let g = ahat.tr_mul(a);
    let mut worst = 0.0f64;
    for l in 0..a.ncols() {
        let best = (0..ahat.ncols())
            .map(|j| 1.0 - g[(j, l)] * g[(j, l)])
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(best);
    }
    Ok(worst.clamp(0.0, 1.0))
}
