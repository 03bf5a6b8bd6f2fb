//! Non-orthogonal joint diagonalization by multiplicative updates
//! `V <- (I + W) V`, each `W` minimizing the linearized off-diagonal energy.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_MAX_ITER: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_THETA_MAX: f64 = 0.5;

/// Halvings tried before an update is declared non-improving.
const MAX_BACKTRACK: usize = 40;
/// Objective below this fraction of the diagonal energy counts as exact.
const EXACT_FLOOR: f64 = 1e-28;
/// Reciprocal condition number below which `V` is treated as singular.
const SINGULAR_RCOND: f64 = 1e-14;
/// Extra runs from random starts when the first run ends inexact.
pub const RESTARTS: usize = 8;
const RESTART_SEED: u64 = 0x6a09_e667_f3bc_c908;

#[derive(Debug, Clone, PartialEq)]
pub struct JointDiagInstance {
    pub mats: Vec<DMatrix<f64>>,
    pub max_iter: usize,
    pub tol: f64,
    pub theta_max: f64,
}

impl JointDiagInstance {
    pub fn new(mats: Vec<DMatrix<f64>>) -> Result<Self> {
        let d = mats.first().map(|m| m.nrows()).unwrap_or(0);
        if d < 2 {
            return Err(Error::InvalidInput(format!(
                "joint diagonalization needs d >= 2, got {d}"
            )));
        }
        for m in &mats {
            if m.shape() != (d, d) {
                return Err(Error::Shape(format!(
                    "expected {d}x{d} matrices, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            linalg::check_symmetric(m, 1e-8)?;
        }
        Ok(Self {
            mats,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            theta_max: DEFAULT_THETA_MAX,
        })
    }

    pub fn with_limits(mut self, max_iter: usize, tol: f64) -> Self {
        self.max_iter = max_iter;
        self.tol = tol;
        self
    }

    pub fn dim(&self) -> usize {
        self.mats[0].nrows()
    }

    /// `sum_m sum_{i != j} (V H_m V')_{ij}^2`.
    pub fn off(&self, v: &DMatrix<f64>) -> f64 {
        self.mats.iter().map(|h| off_energy(&(v * h * v.transpose()))).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointDiagResult {
    pub diagonalizer: DMatrix<f64>,
    /// `V^{-1}` with unit, sign-fixed columns.
    pub theta: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    /// Objective at `V = I` followed by the value after each accepted step.
    pub trace: Vec<f64>,
}

fn off_energy(c: &DMatrix<f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..c.ncols() {
        for i in 0..c.nrows() {
            if i != j {
                s += c[(i, j)] * c[(i, j)];
            }
        }
    }
    s
}

fn diag_energy(cs: &[DMatrix<f64>]) -> f64 {
    cs.iter()
        .map(|c| c.diagonal().iter().map(|x| x * x).sum::<f64>())
        .sum()
}

fn transform(mats: &[DMatrix<f64>], v: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    mats.iter().map(|h| v * h * v.transpose()).collect()
}

fn update_direction(cs: &[DMatrix<f64>]) -> DMatrix<f64> {
    let d = cs[0].nrows();
    let mut z = DMatrix::<f64>::zeros(d, d);
    let mut y = DMatrix::<f64>::zeros(d, d);
    for c in cs {
        for i in 0..d {
            for j in 0..d {
                z[(i, j)] += c[(i, i)] * c[(j, j)];
                if i != j {
                    y[(i, j)] += c[(j, j)] * 0.5 * (c[(i, j)] + c[(j, i)]);
                }
            }
        }
    }
    let mut w = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in (i + 1)..d {
            let det = z[(j, j)] * z[(i, i)] - z[(i, j)] * z[(i, j)];
            let scale = (z[(i, i)] * z[(j, j)]).abs();
            if !(det.abs() > 1e-14 * scale) || scale == 0.0 {
                continue;
            }
            w[(i, j)] = (z[(i, j)] * y[(j, i)] - z[(i, i)] * y[(i, j)]) / det;
            w[(j, i)] = (z[(i, j)] * y[(i, j)] - z[(j, j)] * y[(j, i)]) / det;
        }
    }
    w
}

fn check_invertible(v: &DMatrix<f64>, iteration: usize) -> Result<()> {
    let sv = linalg::singular_values_desc(v);
    let top = sv[0];
    let bottom = sv[sv.len() - 1];
    if !top.is_finite() || !(bottom > SINGULAR_RCOND * top) {
        return Err(Error::DiagonalizerDegenerate(iteration));
    }
    Ok(())
}

/// Rescales every row of `v` to unit length. Row scaling does not change
/// which matrices are diagonal, and fixing it removes the trivial descent
/// direction of shrinking `V`.
fn normalize_rows(mut v: DMatrix<f64>) -> DMatrix<f64> {
    for mut r in v.row_iter_mut() {
        let n = r.norm();
        if n > 0.0 {
            r /= n;
        }
    }
    v
}

/// Halves `w` until `(I + w) V` improves on `obj`.
fn line_search(
    instance: &JointDiagInstance,
    v: &DMatrix<f64>,
    mut w: DMatrix<f64>,
    obj: f64,
) -> Option<(DMatrix<f64>, Vec<DMatrix<f64>>, f64)> {
    let d = v.nrows();
    for _ in 0..MAX_BACKTRACK {
        let cand = normalize_rows((DMatrix::identity(d, d) + &w) * v);
        let cand_cs = transform(&instance.mats, &cand);
        let cand_obj: f64 = cand_cs.iter().map(off_energy).sum();
        if cand_obj.is_finite() && cand_obj < obj {
            return Some((cand, cand_cs, cand_obj));
        }
        w *= 0.5;
    }
    None
}

/// Gradient of the off-diagonal energy of `(I + W) C (I + W)'` at `W = 0`,
/// restricted to zero-diagonal `W`.
fn gradient(cs: &[DMatrix<f64>]) -> DMatrix<f64> {
    let d = cs[0].nrows();
    let mut g = DMatrix::<f64>::zeros(d, d);
    for c in cs {
        let mut off = c.clone();
        off.fill_diagonal(0.0);
        g += &off * c * 4.0;
    }
    g.fill_diagonal(0.0);
    g
}

struct Run {
    v: DMatrix<f64>,
    obj: f64,
    exact: bool,
    converged: bool,
    iterations: usize,
    trace: Vec<f64>,
}

fn run_from(instance: &JointDiagInstance, v0: DMatrix<f64>) -> Result<Run> {
    let mut v = v0;
    let mut cs = transform(&instance.mats, &v);
    let mut obj: f64 = cs.iter().map(off_energy).sum();
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < instance.max_iter {
        if obj <= EXACT_FLOOR * diag_energy(&cs) {
            converged = true;
            break;
        }
        let mut w = update_direction(&cs);
        let wn = w.norm();
        if wn > instance.theta_max {
            w *= instance.theta_max / wn;
        }
        let mut accepted = if wn > 0.0 { line_search(instance, &v, w, obj) } else { None };
        if accepted.is_none() {
            // The linearized step can fail far from a diagonalizer; fall
            // back to steepest descent on the same update family.
            let mut g = gradient(&cs);
            let gn = g.norm();
            if gn > 0.0 {
                g *= -instance.theta_max / gn;
                accepted = line_search(instance, &v, g, obj);
            }
        }
        iterations += 1;
        let Some((nv, ncs, nobj)) = accepted else {
            converged = true;
            break;
        };
        check_invertible(&nv, iterations)?;
        let rel = (obj - nobj) / obj;
        v = nv;
        cs = ncs;
        obj = nobj;
        trace.push(obj);
        if rel < instance.tol {
            converged = true;
            break;
        }
    }
    let exact = obj <= EXACT_FLOOR * diag_energy(&cs);
    Ok(Run { v, obj, exact, converged: converged || exact, iterations, trace })
}

/// Runs the diagonalizer from `V = I` (rows of `V` are kept at unit
/// length). Within a run the objective never increases: a step is halved
/// until it improves, and the run stops once no halving helps. A run that
/// ends above the exactness floor is followed by up to [`RESTARTS`] runs
/// from seeded random orthogonal starts; the lowest objective wins.
pub fn ffdiag(instance: &JointDiagInstance) -> Result<JointDiagResult> {
    let d = instance.dim();
    let mut best = run_from(instance, DMatrix::identity(d, d))?;
    let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED);
    for _ in 0..RESTARTS {
        if best.exact {
            break;
        }
        let start = linalg::random_orthogonal(d, &mut rng);
        // A degenerate restart is simply discarded.
        if let Ok(run) = run_from(instance, start) {
            if run.obj < best.obj {
                best = run;
            }
        }
    }
    let Run { v, obj, converged, iterations, trace, .. } = best;

    let mut theta = v
        .clone()
        .try_inverse()
        .ok_or(Error::DiagonalizerDegenerate(iterations))?;
    for mut col in theta.column_iter_mut() {
        let n = col.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DiagonalizerDegenerate(iterations));
        }
        col /= n;
    }
    linalg::fix_column_signs(&mut theta);
    Ok(JointDiagResult {
        diagonalizer: v,
        theta,
        converged,
        iterations,
        objective: obj,
        trace,
    })
}

/// Greedy matching of `estimate` columns to `reference` columns by
/// absolute inner product.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// `permutation[l]` is the estimate column matched to reference column `l`.
    pub permutation: Vec<usize>,
    /// Sign applied to each estimate column (indexed by estimate column).
    pub signs: Vec<f64>,
    /// `|signs[pi(l)] * est[pi(l)] - ref[l]|` for each reference column.
    pub errors: Vec<f64>,
    pub max_error: f64,
}

pub fn align_signed_permutation(
    estimate: &DMatrix<f64>,
    reference: &DMatrix<f64>,
) -> Result<Alignment> {
    if estimate.shape() != reference.shape() {
        return Err(Error::Shape(format!(
            "estimate is {}x{}, reference is {}x{}",
            estimate.nrows(),
            estimate.ncols(),
            reference.nrows(),
            reference.ncols()
        )));
    }
    let d = reference.ncols();
    let g = estimate.tr_mul(reference);
    let mut used_est = vec![false; d];
    let mut used_ref = vec![false; d];
    let mut permutation = vec![0; d];
    let mut signs = vec![1.0; d];
    for _ in 0..d {
        let mut best = (0, 0);
        let mut best_val = f64::NEG_INFINITY;
        for e in (0..d).filter(|&e| !used_est[e]) {
            for r in (0..d).filter(|&r| !used_ref[r]) {
                if g[(e, r)].abs() > best_val {
                    best_val = g[(e, r)].abs();
                    best = (e, r);
                }
            }
        }
        let (e, r) = best;
        used_est[e] = true;
        used_ref[r] = true;
        permutation[r] = e;
        signs[e] = if g[(e, r)] < 0.0 { -1.0 } else { 1.0 };
    }
    let errors: Vec<f64> = (0..d)
        .map(|r| {
            let e = permutation[r];
            (estimate.column(e) * signs[e] - reference.column(r)).norm()
        })
        .collect();
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(Alignment { permutation, signs, errors, max_error })
}
