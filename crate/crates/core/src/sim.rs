//! Scenario generators, exact reduced-model instances, and the
//! replication and forecasting harnesses.
//!
//! Loadings follow the construction: draw `A†` (p x d) and `B†` (q x d)
//! with iid `U[-3, 3]` entries, let `P` (`Q`) be the leading `d1` (`d2`)
//! left singular vectors, and set `A = P U` with `U` the column-normalized
//! `P' A†` (likewise `B`). Factors are independent AR(1) paths scaled by
//! `|u*_l| |v*_l|`.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::{self, ForecastMethod};
use crate::linalg;
use crate::pipeline::{self, EstimatorConfig};
use crate::series::MatrixSeries;

pub const BURN_IN: usize = 200;
pub const REDRAW_BUDGET: usize = 64;
pub const RANK_TOL: f64 = 1e-8;
pub const AR_MIN: f64 = 0.6;
pub const AR_MAX: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    R1,
    R2,
    R3,
}

impl Scenario {
    /// `(d1, d2)` for `d` factors.
    pub fn ranks(self, d: usize) -> (usize, usize) {
        match self {
            Scenario::R1 => (d, d),
            Scenario::R2 => (d.saturating_sub(1), d),
            Scenario::R3 => (d.saturating_sub(1), d.saturating_sub(1)),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::R1 => "R1",
            Scenario::R2 => "R2",
            Scenario::R3 => "R3",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "R1" => Ok(Scenario::R1),
            "R2" => Ok(Scenario::R2),
            "R3" => Ok(Scenario::R3),
            _ => Err(Error::InvalidInput(format!("unknown scenario '{s}' (expected R1, R2 or R3)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub d: usize,
    pub seed: u64,
    pub noise_scale: f64,
    pub replications: usize,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, n: usize, p: usize, q: usize, d: usize) -> Self {
        Self { scenario, n, p, q, d, seed: 0, noise_scale: 1.0, replications: 1 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_noise(mut self, noise_scale: f64) -> Self {
        self.noise_scale = noise_scale;
        self
    }

    pub fn with_replications(mut self, replications: usize) -> Self {
        self.replications = replications;
        self
    }

    pub fn ranks(&self) -> (usize, usize) {
        self.scenario.ranks(self.d)
    }

    pub fn validate(&self) -> Result<()> {
        let (d1, d2) = self.ranks();
        if self.d == 0 || d1 == 0 || d2 == 0 {
            return Err(Error::InvalidInput(format!(
                "scenario {} needs d >= {}, got {}",
                self.scenario,
                if self.scenario == Scenario::R1 { 1 } else { 2 },
                self.d
            )));
        }
        if self.d >= self.p.min(self.q) {
            return Err(Error::InvalidInput(format!(
                "d = {} must be below min(p, q) = {}",
                self.d,
                self.p.min(self.q)
            )));
        }
        if self.n < 2 {
            return Err(Error::InvalidInput("n must be at least 2".into()));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::InvalidInput(format!("noise scale must be >= 0, got {}", self.noise_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub ar_coefs: Vec<f64>,
    /// `|u*_l| |v*_l|`, the factor scale.
    pub scales: Vec<f64>,
    /// `n x d`; row `t` is `x_t`.
    pub factors: DMatrix<f64>,
    pub series: MatrixSeries,
}

impl GroundTruth {
    /// The noiseless signal `A diag(x_t) B'`.
    pub fn signal(&self, t: usize) -> DMatrix<f64> {
        &self.a * DMatrix::from_diagonal(&self.factors.row(t).transpose()) * self.b.transpose()
    }
}

fn uniform_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-3.0..=3.0))
}

/// Leading `k` left singular vectors (sign-fixed) and all singular values.
fn left_singular(m: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (u, s, _) = linalg::thin_svd(m)?;
    let mut out = u.columns(0, k).into_owned();
    linalg::fix_column_signs(&mut out);
    Ok((out, s))
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = linalg::singular_values_desc(m);
    let top = sv[0];
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * top).count()
}

fn full_column_rank(m: &DMatrix<f64>) -> bool {
    let sv = linalg::singular_values_desc(m);
    sv[sv.len() - 1] > RANK_TOL * sv[0].max(1.0)
}

struct Loadings {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    p: DMatrix<f64>,
    q: DMatrix<f64>,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    scales: Vec<f64>,
}

fn project(dagger: &DMatrix<f64>, basis: &DMatrix<f64>) -> Option<(DMatrix<f64>, Vec<f64>)> {
    let mut u = basis.tr_mul(dagger);
    let mut norms = Vec::with_capacity(u.ncols());
    for mut c in u.column_iter_mut() {
        let n = c.norm();
        if !(n > RANK_TOL) {
            return None;
        }
        c /= n;
        norms.push(n);
    }
    Some((u, norms))
}

fn draw_loadings(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Loadings> {
    let (d1, d2) = cfg.ranks();
    let d = cfg.d;
    for _ in 0..REDRAW_BUDGET {
        let a_dag = uniform_matrix(cfg.p, d, rng);
        let b_dag = uniform_matrix(cfg.q, d, rng);
        if !full_column_rank(&a_dag) || !full_column_rank(&b_dag) {
            continue;
        }
        let (p, _) = left_singular(&a_dag, d1)?;
        let (q, _) = left_singular(&b_dag, d2)?;
        let (Some((u, nu)), Some((v, nv))) = (project(&a_dag, &p), project(&b_dag, &q)) else {
            continue;
        };
        let a = &p * &u;
        let b = &q * &v;
        if numerical_rank(&a) != d1 || numerical_rank(&b) != d2 {
            continue;
        }
        let kr = forecast::khatri_rao(&a, &b)?;
        if !full_column_rank(&kr) {
            continue;
        }
        let scales = nu.iter().zip(&nv).map(|(x, y)| x * y).collect();
        return Ok(Loadings { a, b, p, q, u, v, scales });
    }
    Err(Error::RedrawExhausted(REDRAW_BUDGET))
}

/// AR coefficient with magnitude uniform on `[0.6, 0.95]` and a random sign.
fn draw_ar_coef(rng: &mut ChaCha8Rng) -> f64 {
    let mag = rng.random_range(AR_MIN..=AR_MAX);
    if rng.random_bool(0.5) {
        mag
    } else {
        -mag
    }
}

/// Draws one instance of the scenario.
pub fn generate(cfg: &ScenarioConfig) -> Result<GroundTruth> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let load = draw_loadings(cfg, &mut rng)?;
    let d = cfg.d;
    let ar_coefs: Vec<f64> = (0..d).map(|_| draw_ar_coef(&mut rng)).collect();

    let mut factors = DMatrix::zeros(cfg.n, d);
    for l in 0..d {
        let phi = ar_coefs[l];
        let mut x = 0.0;
        for _ in 0..BURN_IN {
            x = phi * x + rng.sample::<f64, _>(StandardNormal);
        }
        for t in 0..cfg.n {
            x = phi * x + rng.sample::<f64, _>(StandardNormal);
            factors[(t, l)] = x * load.scales[l];
        }
    }

    let mut data = Vec::with_capacity(cfg.n);
    for t in 0..cfg.n {
        let mut y = &load.a * DMatrix::from_diagonal(&factors.row(t).transpose()) * load.b.transpose();
        if cfg.noise_scale > 0.0 {
            for v in y.iter_mut() {
                *v += cfg.noise_scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        data.push(y);
    }
    let series = MatrixSeries::new(data)?;
    Ok(GroundTruth {
        a: load.a,
        b: load.b,
        p: load.p,
        q: load.q,
        u: load.u,
        v: load.v,
        ar_coefs,
        scales: load.scales,
        factors,
        series,
    })
}

/// Orthonormal `n x n` matrix (Haar distributed).
pub fn random_orthogonal<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    linalg::random_orthogonal(n, rng)
}

/// A noiseless reduced-model instance: unit `u_l`, `v_l`, slices
/// `C_l = u_l v_l'`, an orthonormal `W` spanning `vec C_l`, and
/// `Theta = W' C` (unit columns), so that `C = W Theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactInstance {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub theta: DMatrix<f64>,
}

impl ExactInstance {
    pub fn draw<R: Rng>(d1: usize, d2: usize, d: usize, rng: &mut R) -> Result<Self> {
        if d == 0 || d > d1 * d2 {
            return Err(Error::InvalidInput(format!("d = {d} outside 1..={}", d1 * d2)));
        }
        for _ in 0..REDRAW_BUDGET {
            let mut u = DMatrix::from_fn(d1, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut v = DMatrix::from_fn(d2, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            for mut c in u.column_iter_mut() {
                c.normalize_mut();
            }
            for mut c in v.column_iter_mut() {
                c.normalize_mut();
            }
            let c = forecast::khatri_rao(&u, &v)?;
            if !full_column_rank(&c) {
                continue;
            }
            let qr = c.clone().qr();
            let w = qr.q();
            let theta = w.tr_mul(&c);
            return Ok(Self { u, v, w, theta });
        }
        Err(Error::RedrawExhausted(REDRAW_BUDGET))
    }

    pub fn d(&self) -> usize {
        self.w.ncols()
    }

    pub fn slices(&self) -> Vec<DMatrix<f64>> {
        pipeline::w_slices(&self.w, self.u.nrows(), self.v.nrows()).expect("consistent shapes")
    }
}

/// The `d x d` matrix whose row `m` is the diagonal of
/// `Theta^{-1} H_m Theta^{-T}`.
pub fn gamma_bar(theta: &DMatrix<f64>, hset: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let inv = theta
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("Theta is singular".into()))?;
    let d = theta.ncols();
    let mut g = DMatrix::zeros(hset.len(), d);
    for (m, h) in hset.iter().enumerate() {
        let gm = &inv * h * inv.transpose();
        g.set_row(m, &gm.diagonal().transpose());
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub d1: Option<usize>,
    pub d2: Option<usize>,
    pub d: Option<usize>,
    pub varpi_a: Option<f64>,
    pub varpi_b: Option<f64>,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub config: ScenarioConfig,
    pub records: Vec<ReplicationRecord>,
    /// Share of replications with `(d1, d2, d)` all correct.
    pub freq_all: f64,
    /// Share of replications with `d` correct.
    pub freq_d: f64,
    pub mean_varpi_a: f64,
    pub sd_varpi_a: f64,
    pub mean_varpi_b: f64,
    pub sd_varpi_b: f64,
    pub failures: usize,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `f(r)` for `r in 0..count` on up to `jobs` threads and returns the
/// results in index order.
pub fn parallel_map<T, F>(count: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let jobs = jobs.max(1).min(count.max(1));
    if jobs == 1 {
        return (0..count).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let r = next.fetch_add(1, Ordering::Relaxed);
                if r >= count {
                    break;
                }
                let out = f(r);
                slots.lock().expect("result lock")[r] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|v| v.expect("every index is filled"))
        .collect()
}

fn replicate_one(cfg: &ScenarioConfig, est_cfg: &EstimatorConfig, r: usize) -> ReplicationRecord {
    let seed = cfg.seed.wrapping_add(r as u64);
    let start = Instant::now();
    let mut rec = ReplicationRecord {
        replication: r,
        seed,
        d1: None,
        d2: None,
        d: None,
        varpi_a: None,
        varpi_b: None,
        seconds: 0.0,
        error: None,
    };
    let run = || -> Result<(usize, usize, usize, f64, f64)> {
        let truth = generate(&ScenarioConfig { seed, ..cfg.clone() })?;
        let est = pipeline::estimate(&truth.series, &EstimatorConfig { seed, ..est_cfg.clone() })?;
        let va = pipeline::varpi(&truth.a, &est.a)?;
        let vb = pipeline::varpi(&truth.b, &est.b)?;
        Ok((est.d1, est.d2, est.d, va, vb))
    };
    match run() {
        Ok((d1, d2, d, va, vb)) => {
            rec.d1 = Some(d1);
            rec.d2 = Some(d2);
            rec.d = Some(d);
            rec.varpi_a = Some(va);
            rec.varpi_b = Some(vb);
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec.seconds = start.elapsed().as_secs_f64();
    rec
}

/// Generates and estimates `cfg.replications` instances with seeds
/// `cfg.seed + r`. Failed replications are kept as records and counted as
/// misses in the frequencies.
pub fn run_replications(cfg: &ScenarioConfig, est_cfg: &EstimatorConfig, jobs: usize) -> Result<ReplicationSummary> {
    cfg.validate()?;
    if cfg.replications == 0 {
        return Err(Error::InvalidInput("replications must be at least 1".into()));
    }
    let records = parallel_map(cfg.replications, jobs, |r| replicate_one(cfg, est_cfg, r));
    Ok(summarize(cfg, records))
}

/// Aggregates replication records (order-independent).
pub fn summarize(cfg: &ScenarioConfig, records: Vec<ReplicationRecord>) -> ReplicationSummary {
    let (d1, d2) = cfg.ranks();
    let total = records.len().max(1) as f64;
    let hits_all = records
        .iter()
        .filter(|r| r.d1 == Some(d1) && r.d2 == Some(d2) && r.d == Some(cfg.d))
        .count();
    let hits_d = records.iter().filter(|r| r.d == Some(cfg.d)).count();
    let mut va: Vec<f64> = records.iter().filter_map(|r| r.varpi_a).map(|v| 100.0 * v).collect();
    let mut vb: Vec<f64> = records.iter().filter_map(|r| r.varpi_b).map(|v| 100.0 * v).collect();
    // Sorting makes the floating-point sums independent of record order.
    va.sort_by(f64::total_cmp);
    vb.sort_by(f64::total_cmp);
    let (mean_a, sd_a) = mean_sd(&va);
    let (mean_b, sd_b) = mean_sd(&vb);
    let failures = records.iter().filter(|r| r.error.is_some()).count();
    ReplicationSummary {
        config: cfg.clone(),
        freq_all: hits_all as f64 / total,
        freq_d: hits_d as f64 / total,
        mean_varpi_a: mean_a,
        sd_varpi_a: sd_a,
        mean_varpi_b: mean_b,
        sd_varpi_b: sd_b,
        failures,
        records,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMethod {
    Unified,
    Latent,
    LatentForced,
    /// The true signal `A diag(x_{t+h}) B'`; scores the noise floor.
    Oracle,
}

impl fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMethod::Unified => "unified",
            BenchMethod::Latent => "latent",
            BenchMethod::LatentForced => "latent-forced",
            BenchMethod::Oracle => "oracle",
        })
    }
}

impl FromStr for BenchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(BenchMethod::Oracle),
            other => Ok(match other.parse::<ForecastMethod>()? {
                ForecastMethod::Unified => BenchMethod::Unified,
                ForecastMethod::Latent => BenchMethod::Latent,
                ForecastMethod::LatentForced => BenchMethod::LatentForced,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub replication: usize,
    pub method: BenchMethod,
    pub horizon: usize,
    /// `None` when any window failed for this method.
    pub rmse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: BenchMethod,
    pub horizon: usize,
    pub mean_rmse: f64,
    pub sd_rmse: f64,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub config: ScenarioConfig,
    pub steps: usize,
    pub horizons: Vec<usize>,
    pub rows: Vec<BenchRow>,
    pub records: Vec<BenchRecord>,
}

fn bench_one(
    cfg: &ScenarioConfig,
    est_cfg: &EstimatorConfig,
    methods: &[BenchMethod],
    steps: usize,
    horizons: &[usize],
    max_order: usize,
    r: usize,
) -> Vec<BenchRecord> {
    let seed = cfg.seed.wrapping_add(r as u64);
    let hmax = horizons.iter().copied().max().unwrap_or(1);
    let total = cfg.n + steps + hmax - 1;
    let mut sums: Vec<Vec<f64>> = vec![vec![0.0; horizons.len()]; methods.len()];
    let mut errors: Vec<Option<String>> = vec![None; methods.len()];
    let fail_all = |msg: String| -> Vec<BenchRecord> {
        methods
            .iter()
            .flat_map(|&method| {
                let msg = msg.clone();
                horizons.iter().map(move |&h| BenchRecord {
                    replication: r,
                    method,
                    horizon: h,
                    rmse: None,
                    error: Some(msg.clone()),
                })
            })
            .collect()
    };
    let truth = match generate(&ScenarioConfig { seed, n: total, ..cfg.clone() }) {
        Ok(t) => t,
        Err(e) => return fail_all(e.to_string()),
    };
    let ecfg = EstimatorConfig { seed, ..est_cfg.clone() };
    for s in 0..steps {
        let train = match truth.series.window(s, cfg.n) {
            Ok(t) => t,
            Err(e) => return fail_all(e.to_string()),
        };
        let est = pipeline::estimate(&train, &ecfg);
        for (mi, &method) in methods.iter().enumerate() {
            if errors[mi].is_some() {
                continue;
            }
            let preds: Result<Vec<DMatrix<f64>>> = match method {
                BenchMethod::Oracle => Ok((1..=hmax).map(|h| truth.signal(s + cfg.n + h - 1)).collect()),
                other => {
                    let fm = match other {
                        BenchMethod::Unified => ForecastMethod::Unified,
                        BenchMethod::Latent => ForecastMethod::Latent,
                        _ => ForecastMethod::LatentForced,
                    };
                    est.as_ref()
                        .map_err(Clone::clone)
                        .and_then(|e| forecast::predict(&train, e, fm, hmax, max_order))
                        .map(|o| o.predictions)
                }
            };
            match preds {
                Ok(p) => {
                    for (hi, &h) in horizons.iter().enumerate() {
                        sums[mi][hi] += (&p[h - 1] - truth.series.get(s + cfg.n + h - 1)).norm();
                    }
                }
                Err(e) => errors[mi] = Some(e.to_string()),
            }
        }
    }
    let pq = (cfg.p * cfg.q) as f64;
    let mut out = Vec::with_capacity(methods.len() * horizons.len());
    for (mi, &method) in methods.iter().enumerate() {
        for (hi, &h) in horizons.iter().enumerate() {
            out.push(BenchRecord {
                replication: r,
                method,
                horizon: h,
                rmse: match errors[mi] {
                    None => Some(sums[mi][hi] / (steps as f64 * pq.sqrt())),
                    Some(_) => None,
                },
                error: errors[mi].clone(),
            });
        }
    }
    out
}

/// Rolling one-window-at-a-time forecast comparison. Each replication
/// draws `n + steps + max(h) - 1` points; window `s` trains on
/// `Y_{s+1..s+n}` and is scored at `Y_{s+n+h}`. One estimate per window is
/// shared by all methods.
pub fn forecast_bench(
    cfg: &ScenarioConfig,
    est_cfg: &EstimatorConfig,
    methods: &[BenchMethod],
    steps: usize,
    horizons: &[usize],
    max_order: usize,
    jobs: usize,
) -> Result<BenchSummary> {
    cfg.validate()?;
    if horizons.is_empty() || horizons.contains(&0) {
        return Err(Error::InvalidInput("horizons must be non-empty and positive".into()));
    }
    if steps == 0 || methods.is_empty() || cfg.replications == 0 {
        return Ok(BenchSummary {
            config: cfg.clone(),
            steps,
            horizons: horizons.to_vec(),
            rows: Vec::new(),
            records: Vec::new(),
        });
    }
    let records: Vec<BenchRecord> = parallel_map(cfg.replications, jobs, |r| {
        bench_one(cfg, est_cfg, methods, steps, horizons, max_order, r)
    })
    .into_iter()
    .flatten()
    .collect();
    let mut rows = Vec::new();
    for &method in methods {
        for &h in horizons {
            let sel: Vec<&BenchRecord> = records.iter().filter(|r| r.method == method && r.horizon == h).collect();
            let mut vals: Vec<f64> = sel.iter().filter_map(|r| r.rmse).collect();
            vals.sort_by(f64::total_cmp);
            let (mean, sd) = mean_sd(&vals);
            rows.push(BenchRow {
                method,
                horizon: h,
                mean_rmse: mean,
                sd_rmse: sd,
                successes: vals.len(),
                failures: sel.len() - vals.len(),
            });
        }
    }
    Ok(BenchSummary { config: cfg.clone(), steps, horizons: horizons.to_vec(), rows, records })
}

/// `vec` of a matrix as a vector (column-major), for tests and writers.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_ranks_and_parsing() {
        assert_eq!(Scenario::R1.ranks(3), (3, 3));
        assert_eq!(Scenario::R2.ranks(3), (2, 3));
        assert_eq!(Scenario::R3.ranks(3), (2, 2));
        assert_eq!("r2".parse::<Scenario>().unwrap(), Scenario::R2);
        assert!("R4".parse::<Scenario>().is_err());
        assert!(ScenarioConfig::new(Scenario::R1, 50, 3, 5, 3).validate().is_err());
        assert!(ScenarioConfig::new(Scenario::R2, 50, 5, 5, 1).validate().is_err());
        assert!(ScenarioConfig::new(Scenario::R1, 50, 5, 5, 3).validate().is_ok());
    }

    #[test]
    fn generation_is_deterministic_and_exact() {
        let cfg = ScenarioConfig::new(Scenario::R1, 40, 6, 5, 3).with_seed(3).with_noise(0.0);
        let g1 = generate(&cfg).unwrap();
        let g2 = generate(&cfg).unwrap();
        assert_eq!(g1, g2);
        for t in 0..40 {
            assert!((g1.signal(t) - g1.series.get(t)).amax() <= 1e-12);
        }
        for c in g1.a.column_iter().chain(g1.b.column_iter()) {
            assert!((c.norm() - 1.0).abs() < 1e-12);
        }
        for phi in &g1.ar_coefs {
            assert!((AR_MIN..=AR_MAX).contains(&phi.abs()));
        }
    }

    #[test]
    fn rank_contracts() {
        for (sc, seed) in [(Scenario::R1, 1), (Scenario::R2, 2), (Scenario::R3, 3)] {
            let cfg = ScenarioConfig::new(sc, 30, 8, 7, 3).with_seed(seed);
            let g = generate(&cfg).unwrap();
            let (d1, d2) = cfg.ranks();
            assert_eq!(numerical_rank(&g.a), d1);
            assert_eq!(numerical_rank(&g.b), d2);
            assert_eq!(numerical_rank(&forecast::khatri_rao(&g.a, &g.b).unwrap()), 3);
            assert!((&g.p * &g.u - &g.a).amax() == 0.0);
        }
    }

    #[test]
    fn exact_instance_factorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let inst = ExactInstance::draw(3, 2, 3, &mut rng).unwrap();
        let c = forecast::khatri_rao(&inst.u, &inst.v).unwrap();
        assert!((&inst.w * &inst.theta - c).amax() < 1e-12);
        for col in inst.theta.column_iter() {
            assert!((col.norm() - 1.0).abs() < 1e-12);
        }
        assert!((inst.w.tr_mul(&inst.w) - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let seq = parallel_map(17, 1, |r| r * r);
        let par = parallel_map(17, 4, |r| r * r);
        assert_eq!(seq, par);
        assert!(parallel_map(0, 3, |r| r).is_empty());
    }

    #[test]
    fn summary_is_order_invariant() {
        let cfg = ScenarioConfig::new(Scenario::R1, 10, 4, 4, 2);
        let rec = |r: usize, d: usize, v: f64| ReplicationRecord {
            replication: r,
            seed: r as u64,
            d1: Some(2),
            d2: Some(2),
            d: Some(d),
            varpi_a: Some(v),
            varpi_b: Some(v / 2.0),
            seconds: 0.0,
            error: None,
        };
        let recs = vec![rec(0, 2, 0.1), rec(1, 1, 0.3), rec(2, 2, 0.02)];
        let mut rev = recs.clone();
        rev.reverse();
        let a = summarize(&cfg, recs);
        let b = summarize(&cfg, rev);
        assert_eq!(a.mean_varpi_a, b.mean_varpi_a);
        assert_eq!(a.freq_all, 2.0 / 3.0);
    }
}
