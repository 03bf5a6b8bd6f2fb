//! VAR fitting with AIC order selection and the two prediction procedures:
//! through the estimated subspaces (no identification needed) and through
//! the recovered latent factors `x_t = (B ⊙ A)^+ vec(Y_t)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::pipeline::{self, CpEstimate, EstimatorConfig};
use crate::series::MatrixSeries;
use crate::subspace::SubspaceSet;

pub const DEFAULT_MAX_ORDER: usize = 5;
/// Residual covariance determinants at or below this count as singular.
pub const DEGENERATE_DET: f64 = 1e-300;
/// Residual variance below this fraction of the largest series variance
/// counts as an exact fit.
pub const DEGENERATE_REL_VAR: f64 = 1e-20;
/// Smallest singular value of `B ⊙ A` needed for latent recovery.
pub const LATENT_RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct VarModel {
    pub dim: usize,
    pub order: usize,
    /// `coefs[j]` multiplies the value at lag `j + 1`.
    pub coefs: Vec<DMatrix<f64>>,
    pub intercept: DVector<f64>,
    pub resid_cov: DMatrix<f64>,
    /// `(order, AIC)` for each candidate; `-inf` marks a singular fit.
    pub aic: Vec<(usize, f64)>,
    pub degenerate: bool,
}

struct OrderFit {
    coefs: Vec<DMatrix<f64>>,
    intercept: DVector<f64>,
    resid_cov: DMatrix<f64>,
    det: f64,
    min_eig: f64,
}

fn fit_order(x: &DMatrix<f64>, r: usize) -> Result<OrderFit> {
    let (n, m) = x.shape();
    let rows = n - r;
    let cols = 1 + r * m;
    let mut design = DMatrix::zeros(rows, cols);
    let mut target = DMatrix::zeros(rows, m);
    for t in r..n {
        let row = t - r;
        design[(row, 0)] = 1.0;
        for lag in 1..=r {
            for j in 0..m {
                design[(row, 1 + (lag - 1) * m + j)] = x[(t - lag, j)];
            }
        }
        target.set_row(row, &x.row(t));
    }
    let beta = linalg::pseudo_inverse(&design)? * &target;
    let resid = &target - &design * &beta;
    let resid_cov = linalg::symmetrize(&(resid.tr_mul(&resid) / rows as f64));
    let det = resid_cov.determinant();
    let min_eig = linalg::sym_eigen_desc(&resid_cov).0.min();
    let intercept = beta.row(0).transpose();
    let coefs = (0..r)
        .map(|lag| beta.rows(1 + lag * m, m).transpose())
        .collect();
    Ok(OrderFit { coefs, intercept, resid_cov, det, min_eig })
}

/// Largest order a series of shape `n x m` supports.
pub fn feasible_order(n: usize, m: usize) -> usize {
    if m == 0 || n < m + 2 {
        return 0;
    }
    (n - m - 2) / m
}

/// Least-squares VAR(r) with intercept for `r = 1..=max_order`, choosing
/// the order by `AIC(r) = log det Sigma_r + 2 r m^2 / (n - r)`; ties keep
/// the smaller order. An order whose residual covariance is singular, or
/// negligible next to the data variance, is selected directly and the fit
/// is marked degenerate.
pub fn fit_var(x: &DMatrix<f64>, max_order: usize) -> Result<VarModel> {
    let (n, m) = x.shape();
    if max_order == 0 || m == 0 {
        return Err(Error::InvalidInput("VAR needs max_order >= 1 and a non-empty series".into()));
    }
    if n <= m * max_order + m + 1 {
        return Err(Error::InsufficientData(format!(
            "VAR({max_order}) in dimension {m} needs n > {}, got {n}",
            m * max_order + m + 1
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in VAR input".into()));
    }
    let scale = (0..m)
        .map(|j| {
            let col = x.column(j);
            let mean = col.mean();
            col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64
        })
        .fold(0.0, f64::max);
    let mut aic = Vec::with_capacity(max_order);
    let mut best: Option<(usize, f64, OrderFit)> = None;
    for r in 1..=max_order {
        let fit = fit_order(x, r)?;
        if fit.det <= DEGENERATE_DET || fit.min_eig <= DEGENERATE_REL_VAR * scale {
            aic.push((r, f64::NEG_INFINITY));
            return Ok(VarModel {
                dim: m,
                order: r,
                coefs: fit.coefs,
                intercept: fit.intercept,
                resid_cov: fit.resid_cov,
                aic,
                degenerate: true,
            });
        }
        let value = fit.det.ln() + 2.0 * (r * m * m) as f64 / (n - r) as f64;
        aic.push((r, value));
        if best.as_ref().is_none_or(|(_, b, _)| value < *b) {
            best = Some((r, value, fit));
        }
    }
    let (order, _, fit) = best.expect("at least one order is fitted");
    Ok(VarModel {
        dim: m,
        order,
        coefs: fit.coefs,
        intercept: fit.intercept,
        resid_cov: fit.resid_cov,
        aic,
        degenerate: false,
    })
}

/// Iterated forecasts; `history` rows are time points, most recent last.
/// Returns an `h x m` matrix.
pub fn forecast_var(model: &VarModel, history: &DMatrix<f64>, h: usize) -> Result<DMatrix<f64>> {
    if h == 0 {
        return Err(Error::InvalidInput("forecast horizon must be at least 1".into()));
    }
    if history.ncols() != model.dim {
        return Err(Error::Shape(format!(
            "history has {} columns, model dimension is {}",
            history.ncols(),
            model.dim
        )));
    }
    if history.nrows() < model.order {
        return Err(Error::InsufficientData(format!(
            "history of length {} is shorter than the order {}",
            history.nrows(),
            model.order
        )));
    }
    let mut path: Vec<DVector<f64>> = history
        .row_iter()
        .skip(history.nrows() - model.order)
        .map(|r| r.transpose())
        .collect();
    let mut out = DMatrix::zeros(h, model.dim);
    for step in 0..h {
        let len = path.len();
        let mut next = model.intercept.clone();
        for (lag, a) in model.coefs.iter().enumerate() {
            next += a * &path[len - 1 - lag];
        }
        out.set_row(step, &next.transpose());
        path.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForecastMethod {
    Unified,
    Latent,
    /// Latent recovery even when the loadings are flagged as not identifiable.
    LatentForced,
}

impl fmt::Display for ForecastMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ForecastMethod::Unified => "unified",
            ForecastMethod::Latent => "latent",
            ForecastMethod::LatentForced => "latent-forced",
        })
    }
}

impl FromStr for ForecastMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unified" => Ok(ForecastMethod::Unified),
            "latent" => Ok(ForecastMethod::Latent),
            "latent-forced" => Ok(ForecastMethod::LatentForced),
            other => Err(Error::InvalidInput(format!(
                "unknown method '{other}' (expected unified, latent or latent-forced)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastOutput {
    pub h: usize,
    pub method: ForecastMethod,
    /// `Yhat_{n+1}, ..., Yhat_{n+h}`.
    pub predictions: Vec<DMatrix<f64>>,
    /// The fitted latent series (`n x dim`).
    pub latent: DMatrix<f64>,
    /// Latent forecasts (`h x dim`).
    pub latent_forecast: DMatrix<f64>,
    pub model: VarModel,
}

fn fit_and_forecast(latent: &DMatrix<f64>, h: usize, max_order: usize) -> Result<(VarModel, DMatrix<f64>)> {
    if h == 0 {
        return Err(Error::InvalidInput("forecast horizon must be at least 1".into()));
    }
    let order = max_order.min(feasible_order(latent.nrows(), latent.ncols()));
    if order == 0 {
        return Err(Error::InsufficientData(format!(
            "{} observations cannot support a VAR in dimension {}",
            latent.nrows(),
            latent.ncols()
        )));
    }
    let model = fit_var(latent, order)?;
    let fc = forecast_var(&model, latent, h)?;
    Ok((model, fc))
}

/// `x*_t = W' vec(P' Y_t Q)`, a VAR on `x*`, and
/// `Yhat = P mat(W xhat*) Q'`.
pub fn predict_unified(
    series: &MatrixSeries,
    sub: &SubspaceSet,
    h: usize,
    max_order: usize,
) -> Result<ForecastOutput> {
    let (d1, d2, d) = (sub.d1(), sub.d2(), sub.d());
    if sub.p.nrows() != series.p() || sub.q.nrows() != series.q() || sub.w.nrows() != d1 * d2 {
        return Err(Error::Shape("subspaces do not match the series".into()));
    }
    let mut latent = DMatrix::zeros(series.n(), d);
    for (t, y) in series.observations().iter().enumerate() {
        let z = sub.p.tr_mul(y) * &sub.q;
        let x = sub.w.tr_mul(&DVector::from_column_slice(z.as_slice()));
        latent.set_row(t, &x.transpose());
    }
    let (model, fc) = fit_and_forecast(&latent, h, max_order)?;
    let predictions = fc
        .row_iter()
        .map(|x| {
            let z = &sub.w * x.transpose();
            &sub.p * DMatrix::from_column_slice(d1, d2, z.as_slice()) * sub.q.transpose()
        })
        .collect();
    Ok(ForecastOutput {
        h,
        method: ForecastMethod::Unified,
        predictions,
        latent,
        latent_forecast: fc,
        model,
    })
}

/// `B ⊙ A`: column `l` is `b_l ⊗ a_l = vec(a_l b_l')`.
pub fn khatri_rao(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape("A and B have different column counts".into()));
    }
    let mut l = DMatrix::zeros(a.nrows() * b.nrows(), a.ncols());
    for j in 0..a.ncols() {
        let outer = a.column(j) * b.column(j).transpose();
        l.column_mut(j).copy_from_slice(outer.as_slice());
    }
    Ok(l)
}

/// `xhat_t = (B ⊙ A)^+ vec(Y_t)`, a VAR on `xhat`, and
/// `Yhat = A diag(xhat) B'`. Refuses loadings flagged as not identifiable
/// unless `force` is set; a numerically rank-deficient `B ⊙ A` is always
/// refused.
pub fn predict_latent(
    series: &MatrixSeries,
    est: &CpEstimate,
    h: usize,
    max_order: usize,
    force: bool,
) -> Result<ForecastOutput> {
    if est.a.nrows() != series.p() || est.b.nrows() != series.q() {
        return Err(Error::Shape("loadings do not match the series".into()));
    }
    if !force && !est.diagnostics.structurally_identifiable {
        return Err(Error::NotIdentifiable(format!(
            "(d1, d2, d) = ({}, {}, {})",
            est.d1, est.d2, est.d
        )));
    }
    let l = khatri_rao(&est.a, &est.b)?;
    let smin = linalg::min_singular_value(&l);
    if !(smin > LATENT_RANK_TOL) {
        return Err(Error::NotIdentifiable(format!(
            "smallest singular value of B ⊙ A is {smin:e}"
        )));
    }
    let pinv = linalg::pseudo_inverse(&l)?;
    let mut latent = DMatrix::zeros(series.n(), est.d);
    for (t, y) in series.observations().iter().enumerate() {
        let x = &pinv * DVector::from_column_slice(y.as_slice());
        latent.set_row(t, &x.transpose());
    }
    let (model, fc) = fit_and_forecast(&latent, h, max_order)?;
    let predictions = fc
        .row_iter()
        .map(|x| &est.a * DMatrix::from_diagonal(&x.transpose()) * est.b.transpose())
        .collect();
    Ok(ForecastOutput {
        h,
        method: if force { ForecastMethod::LatentForced } else { ForecastMethod::Latent },
        predictions,
        latent,
        latent_forecast: fc,
        model,
    })
}

/// Forecast with an existing estimate.
pub fn predict(
    series: &MatrixSeries,
    est: &CpEstimate,
    method: ForecastMethod,
    h: usize,
    max_order: usize,
) -> Result<ForecastOutput> {
    match method {
        ForecastMethod::Unified => predict_unified(series, &est.subspaces(), h, max_order),
        ForecastMethod::Latent => predict_latent(series, est, h, max_order, false),
        ForecastMethod::LatentForced => predict_latent(series, est, h, max_order, true),
    }
}

fn check_same_shape(yhat: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if yhat.shape() != y.shape() || y.is_empty() {
        return Err(Error::Shape("forecast and target shapes differ".into()));
    }
    Ok(())
}

/// `{ (pq)^{-1} sum_ij (yhat_ij - y_ij)^2 }^{1/2}`.
pub fn rrmse(yhat: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(yhat, y)?;
    Ok(((yhat - y).norm_squared() / y.len() as f64).sqrt())
}

/// `(pq)^{-1} sum_ij |yhat_ij - y_ij|`.
pub fn rmae(yhat: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(yhat, y)?;
    Ok((yhat - y).iter().map(|v| v.abs()).sum::<f64>() / y.len() as f64)
}

/// `(m sqrt(pq))^{-1} sum_s ||Yhat_s - Y_s||_F` over `m` pairs.
pub fn rmse(pairs: &[(DMatrix<f64>, DMatrix<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no forecasts to score".into()));
    }
    let mut total = 0.0;
    for (yhat, y) in pairs {
        check_same_shape(yhat, y)?;
        total += (yhat - y).norm();
    }
    let pq = pairs[0].1.len() as f64;
    Ok(total / (pairs.len() as f64 * pq.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    /// 0-based offset of the training window.
    pub step: usize,
    pub horizon: usize,
    pub rrmse: f64,
    pub rmae: f64,
    pub frobenius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingReport {
    pub method: ForecastMethod,
    pub window: usize,
    pub scores: Vec<StepScore>,
    /// `(horizon, RMSE)` over all steps.
    pub rmse: Vec<(usize, f64)>,
}

/// Rolls a window of length `window` through the series; each step
/// re-estimates on the window (the projection series, ranks and subspaces
/// are recomputed unless `config` pins the ranks), forecasts up to the
/// largest horizon, and scores each requested horizon against the
/// realized values.
pub fn rolling_eval(
    series: &MatrixSeries,
    method: ForecastMethod,
    window: usize,
    horizons: &[usize],
    config: &EstimatorConfig,
    max_order: usize,
) -> Result<RollingReport> {
    if horizons.is_empty() || horizons.contains(&0) {
        return Err(Error::InvalidInput("horizons must be non-empty and positive".into()));
    }
    let hmax = *horizons.iter().max().expect("non-empty");
    if window < 3 || window + hmax > series.n() {
        return Err(Error::InsufficientData(format!(
            "window {window} plus horizon {hmax} exceeds n = {}",
            series.n()
        )));
    }
    let steps = series.n() - window - hmax + 1;
    let mut scores = Vec::with_capacity(steps * horizons.len());
    for s in 0..steps {
        let train = series.window(s, window)?;
        let est = pipeline::estimate(&train, config)?;
        let out = predict(&train, &est, method, hmax, max_order)?;
        for &h in horizons {
            let yhat = &out.predictions[h - 1];
            let y = series.get(s + window + h - 1);
            scores.push(StepScore {
                step: s,
                horizon: h,
                rrmse: rrmse(yhat, y)?,
                rmae: rmae(yhat, y)?,
                frobenius: (yhat - y).norm(),
            });
        }
    }
    let pq = (series.p() * series.q()) as f64;
    let rmse = horizons
        .iter()
        .map(|&h| {
            let total: f64 = scores.iter().filter(|s| s.horizon == h).map(|s| s.frobenius).sum();
            (h, total / (steps as f64 * pq.sqrt()))
        })
        .collect();
    Ok(RollingReport { method, window, scores, rmse })
}
