//! `cpmts`: estimate, forecast, simulate and benchmark CP-factor models for
//! matrix time series from the command line.
//!
//! Series files are CSV with one row per time point holding `vec(Y_t)`
//! (column-major, `p*q` values) next to a JSON sidecar
//! `{"n": .., "p": .., "q": .., "layout": "col-major"}`.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 usage or I/O error.

mod config;
mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use cpmts_core::forecast::{self, ForecastMethod};
use cpmts_core::sim::{self, BenchMethod, Scenario, ScenarioConfig};
use cpmts_core::{pipeline, CpEstimate, EstimatorConfig};
use serde::Serialize;
use serde_json::json;

use config::EstimatorArgs;

pub const DIAGNOSTICS_SCHEMA: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] cpmts_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use cpmts_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Io(_) => 2,
            CliError::Core(E::InvalidInput(_) | E::Shape(_) | E::NonFinite { .. } | E::InsufficientLag { .. }) => 2,
            CliError::Core(_) => 1,
        }
    }

    fn hint(&self) -> Option<&'static str> {
        match self {
            CliError::Core(cpmts_core::Error::NotIdentifiable(_)) => {
                Some("loadings are not identifiable for this series; rerun with --method unified")
            }
            _ => None,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cpmts", version, about = "CP-factor models for matrix-valued time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate ranks and loadings from a series file.
    Estimate(EstimateArgs),
    /// Forecast the next h observations.
    Forecast(ForecastArgs),
    /// Generate a simulated series with its ground truth.
    Simulate(SimulateArgs),
    /// Run seeded Monte Carlo replications.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    #[arg(long)]
    input: PathBuf,
    /// JSON sidecar; defaults to `meta.json` next to the input.
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

impl InputArgs {
    fn meta_path(&self) -> PathBuf {
        self.meta
            .clone()
            .unwrap_or_else(|| self.input.parent().unwrap_or(Path::new(".")).join("meta.json"))
    }
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    io: InputArgs,
    #[command(flatten)]
    est: EstimatorArgs,
}

#[derive(Debug, Args)]
struct ForecastArgs {
    #[command(flatten)]
    io: InputArgs,
    #[command(flatten)]
    est: EstimatorArgs,
    /// unified, latent or latent-forced.
    #[arg(long, default_value = "unified")]
    method: ForecastMethod,
    /// Forecast horizon.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    h: u64,
    /// Largest VAR order considered by AIC.
    #[arg(long = "max-order")]
    max_order: Option<usize>,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    #[arg(long, default_value = "R1")]
    scenario: Scenario,
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    p: usize,
    #[arg(long, default_value_t = 20)]
    q: usize,
    #[arg(long, default_value_t = 3)]
    d: usize,
    /// Noise scale; 0 gives the noiseless variant.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
}

impl ScenarioArgs {
    fn config(&self, seed: u64) -> ScenarioConfig {
        ScenarioConfig::new(self.scenario, self.n, self.p, self.q, self.d).with_seed(seed).with_noise(self.noise)
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, env = "CPMTS_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    est: EstimatorArgs,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Rolling forecast windows per replication; 0 skips the forecast study.
    #[arg(long = "forecast-steps", default_value_t = 0)]
    forecast_steps: usize,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    horizons: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "unified,latent")]
    methods: Vec<BenchMethod>,
    #[arg(long = "max-order")]
    max_order: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate(a) => cmd_estimate(&a),
        Command::Forecast(a) => cmd_forecast(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Bench(a) => cmd_bench(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(h) = e.hint() {
                eprintln!("hint: {h}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn load_and_estimate(io_args: &InputArgs, cfg: &EstimatorConfig) -> Result<(cpmts_core::MatrixSeries, CpEstimate), CliError> {
    let meta = io::read_meta(&io_args.meta_path())?;
    let series = io::read_series(&io_args.input, &meta)?;
    let est = pipeline::estimate(&series, cfg)?;
    warn_all(est.warnings());
    Ok((series, est))
}

#[derive(Serialize)]
struct DiagnosticsFile<'a> {
    schema: u32,
    d1: usize,
    d2: usize,
    d: usize,
    estimator: &'a EstimatorConfig,
    #[serde(flatten)]
    diagnostics: &'a pipeline::Diagnostics,
}

fn write_estimate(dir: &Path, est: &CpEstimate, cfg: &EstimatorConfig) -> Result<(), CliError> {
    io::ensure_dir(dir)?;
    io::write_matrix(&dir.join("loadings_A.csv"), &est.a, Some(&io::column_names("a", est.d)))?;
    io::write_matrix(&dir.join("loadings_B.csv"), &est.b, Some(&io::column_names("b", est.d)))?;
    let body = json!({
        "d1": est.d1,
        "d2": est.d2,
        "d": est.d,
        "A": io::rows_of(&est.a),
        "B": io::rows_of(&est.b),
        "P": io::rows_of(&est.p),
        "Q": io::rows_of(&est.q),
        "W": io::rows_of(&est.w),
        "Theta": io::rows_of(&est.theta),
        "U": io::rows_of(&est.u),
        "V": io::rows_of(&est.v),
    });
    io::write_json(&dir.join("estimate.json"), &body)?;
    let diag = DiagnosticsFile {
        schema: DIAGNOSTICS_SCHEMA,
        d1: est.d1,
        d2: est.d2,
        d: est.d,
        estimator: cfg,
        diagnostics: &est.diagnostics,
    };
    io::write_json(&dir.join("diagnostics.json"), &diag)
}

fn cmd_estimate(a: &EstimateArgs) -> Result<(), CliError> {
    let resolved = a.est.resolve(None)?;
    let (_, est) = load_and_estimate(&a.io, &resolved.estimator)?;
    write_estimate(&a.io.out, &est, &resolved.estimator)?;
    eprintln!("ranks: d1={} d2={} d={}", est.d1, est.d2, est.d);
    Ok(())
}

fn cmd_forecast(a: &ForecastArgs) -> Result<(), CliError> {
    let resolved = a.est.resolve(a.max_order)?;
    let h = usize::try_from(a.h).map_err(|_| CliError::Usage("horizon too large".into()))?;
    let (series, est) = load_and_estimate(&a.io, &resolved.estimator)?;
    let out = forecast::predict(&series, &est, a.method, h, resolved.max_order)?;
    let dir = io::ensure_dir(&a.io.out)?;
    write_estimate(&dir, &est, &resolved.estimator)?;
    for (k, y) in out.predictions.iter().enumerate() {
        io::write_matrix(&dir.join(format!("forecast_h{}.csv", k + 1)), y, None)?;
    }
    let aic: Vec<serde_json::Value> =
        out.model.aic.iter().map(|(r, v)| json!({ "order": r, "aic": v })).collect();
    let body = json!({
        "method": out.method,
        "h": out.h,
        "d1": est.d1,
        "d2": est.d2,
        "d": est.d,
        "var_order": out.model.order,
        "var_degenerate": out.model.degenerate,
        "aic": aic,
        "latent_forecast": io::rows_of(&out.latent_forecast),
    });
    io::write_json(&dir.join("forecast.json"), &body)?;
    if out.model.degenerate {
        eprintln!("warning: latent VAR residual covariance is singular; order {} kept", out.model.order);
    }
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let cfg = a.scenario.config(a.seed);
    let truth = sim::generate(&cfg)?;
    let dir = io::ensure_dir(&a.out)?;
    io::write_series(&dir, &truth.series)?;
    let d = cfg.d;
    io::write_matrix(&dir.join("truth_A.csv"), &truth.a, Some(&io::column_names("a", d)))?;
    io::write_matrix(&dir.join("truth_B.csv"), &truth.b, Some(&io::column_names("b", d)))?;
    io::write_matrix(&dir.join("factors.csv"), &truth.factors, Some(&io::column_names("x", d)))?;
    let body = json!({
        "config": cfg,
        "A": io::rows_of(&truth.a),
        "B": io::rows_of(&truth.b),
        "P": io::rows_of(&truth.p),
        "Q": io::rows_of(&truth.q),
        "U": io::rows_of(&truth.u),
        "V": io::rows_of(&truth.v),
        "ar_coefs": truth.ar_coefs,
        "scales": truth.scales,
        "factors": io::rows_of(&truth.factors),
    });
    io::write_json(&dir.join("truth.json"), &body)
}

fn opt(v: Option<impl ToString>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    let resolved = a.est.resolve(a.max_order)?;
    if a.reps == 0 {
        return Err(CliError::Usage("--reps must be at least 1".into()));
    }
    if a.horizons.is_empty() || a.horizons.contains(&0) {
        return Err(CliError::Usage("--horizons must be positive".into()));
    }
    let cfg = a.scenario.config(resolved.estimator.seed).with_replications(a.reps);
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let start = Instant::now();
    let summary = sim::run_replications(&cfg, &resolved.estimator, a.jobs)?;
    let dir = io::ensure_dir(&a.out)?;

    let mut rows = String::from("replication,seed,d1,d2,d,varpi_a,varpi_b,error\n");
    for r in &summary.records {
        rows.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.replication,
            r.seed,
            opt(r.d1),
            opt(r.d2),
            opt(r.d),
            opt(r.varpi_a),
            opt(r.varpi_b),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], " ")
        ));
    }
    io::write_text(&dir.join("replications.csv"), &rows)?;
    let table = format!(
        "scenario,n,p,q,d,noise,reps,freq_all,freq_d,mean_varpi_a,sd_varpi_a,mean_varpi_b,sd_varpi_b,failures\n\
         {},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        cfg.scenario,
        cfg.n,
        cfg.p,
        cfg.q,
        cfg.d,
        cfg.noise_scale,
        cfg.replications,
        summary.freq_all,
        summary.freq_d,
        summary.mean_varpi_a,
        summary.sd_varpi_a,
        summary.mean_varpi_b,
        summary.sd_varpi_b,
        summary.failures
    );
    io::write_text(&dir.join("summary.csv"), &table)?;
    let mut body = serde_json::to_value(&summary).map_err(|e| CliError::Io(e.to_string()))?;
    // Timings would break byte-for-byte reproducibility.
    if let Some(records) = body.get_mut("records").and_then(|r| r.as_array_mut()) {
        for r in records {
            if let Some(obj) = r.as_object_mut() {
                obj.remove("seconds");
            }
        }
    }
    io::write_json(&dir.join("summary.json"), &body)?;
    eprintln!(
        "{} {}x{} d={} reps={}: freq_all={:.4} mean 100*varpi2(A)={:.3} failures={}",
        cfg.scenario, cfg.p, cfg.q, cfg.d, cfg.replications, summary.freq_all, summary.mean_varpi_a, summary.failures
    );

    if a.forecast_steps > 0 {
        let fb = sim::forecast_bench(
            &cfg,
            &resolved.estimator,
            &a.methods,
            a.forecast_steps,
            &a.horizons,
            resolved.max_order,
            a.jobs,
        )?;
        let mut table = String::from("method,horizon,mean_rmse,sd_rmse,successes,failures\n");
        for r in &fb.rows {
            table.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.method, r.horizon, r.mean_rmse, r.sd_rmse, r.successes, r.failures
            ));
            eprintln!("forecast {} h={}: mean rmse {:.5} ({} ok, {} failed)", r.method, r.horizon, r.mean_rmse, r.successes, r.failures);
        }
        io::write_text(&dir.join("forecast.csv"), &table)?;
        io::write_json(&dir.join("forecast.json"), &fb)?;
    }
    eprintln!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
