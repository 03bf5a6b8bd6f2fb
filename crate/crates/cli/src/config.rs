use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use cpmts_core::forecast::DEFAULT_MAX_ORDER;
use cpmts_core::{EstimatorConfig, Tuning};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// `auto` or a nonnegative number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TuningSpec {
    Value(f64),
    Word(AutoWord),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoWord {
    Auto,
}

impl TuningSpec {
    fn to_tuning(self, name: &str) -> Result<Tuning, CliError> {
        match self {
            TuningSpec::Word(AutoWord::Auto) => Ok(Tuning::Auto),
            TuningSpec::Value(v) if v >= 0.0 && v.is_finite() => Ok(Tuning::Value(v)),
            TuningSpec::Value(v) => Err(CliError::Usage(format!("{name} must be nonnegative, got {v}"))),
        }
    }
}

impl FromStr for TuningSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(TuningSpec::Word(AutoWord::Auto));
        }
        let v: f64 = s.parse().map_err(|_| format!("expected 'auto' or a number, got '{s}'"))?;
        if !(v >= 0.0) || !v.is_finite() {
            return Err(format!("value must be nonnegative, got {s}"));
        }
        Ok(TuningSpec::Value(v))
    }
}

impl fmt::Display for TuningSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TuningSpec::Value(v) => write!(f, "{v}"),
            TuningSpec::Word(_) => f.write_str("auto"),
        }
    }
}

/// `d1,d2,d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinnedRanks(pub usize, pub usize, pub usize);

impl FromStr for PinnedRanks {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|_| format!("bad rank '{t}'")))
            .collect::<Result<_, _>>()?;
        match parts.as_slice() {
            [a, b, c] if *a > 0 && *b > 0 && *c > 0 => Ok(PinnedRanks(*a, *b, *c)),
            _ => Err(format!("expected three positive integers d1,d2,d, got '{s}'")),
        }
    }
}

/// Run configuration file (JSON). Every field is optional; command-line
/// flags override it and unset fields fall back to automatic defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[serde(rename = "Ktilde")]
    pub k_tilde: Option<usize>,
    pub delta1: Option<TuningSpec>,
    pub delta2: Option<TuningSpec>,
    pub c1: Option<TuningSpec>,
    pub c2: Option<TuningSpec>,
    pub c3: Option<TuningSpec>,
    pub seed: Option<u64>,
    pub max_order: Option<usize>,
    pub pin_ranks: Option<[usize; 3]>,
    pub rotate: Option<bool>,
    pub jd_max_iter: Option<usize>,
    pub jd_tol: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.is_file() {
            return Err(CliError::Io(format!("config not found: {}", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("bad config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Args)]
pub struct EstimatorArgs {
    /// JSON run configuration; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of lags in the factor-space matrix.
    #[arg(long = "K")]
    pub k: Option<usize>,
    /// Number of lags in the row and column matrices.
    #[arg(long = "Ktilde")]
    pub k_tilde: Option<usize>,
    /// Threshold for the row matrix (`auto` or a value).
    #[arg(long)]
    pub delta1: Option<TuningSpec>,
    /// Threshold for the column matrix (`auto` or a value).
    #[arg(long)]
    pub delta2: Option<TuningSpec>,
    /// Ridge constant for all three ratio estimators (`auto` or a value).
    #[arg(long)]
    pub ridge: Option<TuningSpec>,
    #[arg(long, env = "CPMTS_SEED")]
    pub seed: Option<u64>,
    /// Fix the ranks as d1,d2,d.
    #[arg(long = "pin-ranks")]
    pub pin_ranks: Option<PinnedRanks>,
}

/// Estimator settings after merging flags, the config file and defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub estimator: EstimatorConfig,
    pub max_order: usize,
}

impl EstimatorArgs {
    pub fn resolve(&self, max_order_flag: Option<usize>) -> Result<Resolved, CliError> {
        let file = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let mut cfg = EstimatorConfig::default();
        if let Some(k) = self.k.or(file.k) {
            cfg.k = k;
        }
        if let Some(k) = self.k_tilde.or(file.k_tilde) {
            cfg.k_tilde = k;
        }
        if cfg.k == 0 || cfg.k_tilde == 0 {
            return Err(CliError::Usage("K and Ktilde must be at least 1".into()));
        }
        let pick = |flag: Option<TuningSpec>, file: Option<TuningSpec>, name: &str| -> Result<Tuning, CliError> {
            flag.or(file).map_or(Ok(Tuning::Auto), |t| t.to_tuning(name))
        };
        cfg.delta1 = pick(self.delta1, file.delta1, "delta1")?;
        cfg.delta2 = pick(self.delta2, file.delta2, "delta2")?;
        cfg.c1 = pick(self.ridge, file.c1, "c1")?;
        cfg.c2 = pick(self.ridge, file.c2, "c2")?;
        cfg.c3 = pick(self.ridge, file.c3, "c3")?;
        for (name, t) in [("c1", cfg.c1), ("c2", cfg.c2), ("c3", cfg.c3)] {
            if t == Tuning::Value(0.0) {
                return Err(CliError::Usage(format!("{name} must be positive")));
            }
        }
        cfg.seed = self.seed.or(file.seed).unwrap_or(0);
        cfg.pinned_ranks = self
            .pin_ranks
            .map(|PinnedRanks(a, b, c)| (a, b, c))
            .or(file.pin_ranks.map(|[a, b, c]| (a, b, c)));
        if let Some((a, b, c)) = cfg.pinned_ranks {
            if a == 0 || b == 0 || c == 0 {
                return Err(CliError::Usage("pinned ranks must be positive".into()));
            }
        }
        if let Some(r) = file.rotate {
            cfg.rotate = r;
        }
        if let Some(it) = file.jd_max_iter {
            cfg.jd_max_iter = it;
        }
        if let Some(tol) = file.jd_tol {
            if !(tol > 0.0) {
                return Err(CliError::Usage(format!("jd_tol must be positive, got {tol}")));
            }
            cfg.jd_tol = tol;
        }
        let max_order = max_order_flag.or(file.max_order).unwrap_or(DEFAULT_MAX_ORDER);
        if max_order == 0 {
            return Err(CliError::Usage("max order must be at least 1".into()));
        }
        Ok(Resolved { estimator: cfg, max_order })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bare() -> EstimatorArgs {
        EstimatorArgs {
            config: None,
            k: None,
            k_tilde: None,
            delta1: None,
            delta2: None,
            ridge: None,
            seed: None,
            pin_ranks: None,
        }
    }

    #[test]
    fn tuning_parse() {
        assert_eq!("auto".parse::<TuningSpec>().unwrap(), TuningSpec::Word(AutoWord::Auto));
        assert_eq!("0.5".parse::<TuningSpec>().unwrap(), TuningSpec::Value(0.5));
        assert!("-1".parse::<TuningSpec>().is_err());
        assert!("x".parse::<TuningSpec>().is_err());
        let t: TuningSpec = serde_json::from_str("\"auto\"").unwrap();
        assert_eq!(t, TuningSpec::Word(AutoWord::Auto));
        let t: TuningSpec = serde_json::from_str("0.25").unwrap();
        assert_eq!(t, TuningSpec::Value(0.25));
    }

    #[test]
    fn pinned_parse() {
        assert_eq!("2,2,3".parse::<PinnedRanks>().unwrap(), PinnedRanks(2, 2, 3));
        assert!("2,2".parse::<PinnedRanks>().is_err());
        assert!("0,2,3".parse::<PinnedRanks>().is_err());
    }

    #[test]
    fn defaults_are_auto() {
        let r = bare().resolve(None).unwrap();
        assert_eq!(r.estimator, EstimatorConfig::default());
        assert_eq!(r.max_order, DEFAULT_MAX_ORDER);
    }

    #[test]
    fn flag_beats_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"K": 7, "Ktilde": 4, "delta1": 0.3, "c2": "auto", "seed": 5, "max_order": 2}"#)
            .unwrap();
        let mut args = bare();
        args.config = Some(path);
        args.k = Some(9);
        let r = args.resolve(None).unwrap();
        assert_eq!(r.estimator.k, 9);
        assert_eq!(r.estimator.k_tilde, 4);
        assert_eq!(r.estimator.delta1, Tuning::Value(0.3));
        assert_eq!(r.estimator.delta2, Tuning::Auto);
        assert_eq!(r.estimator.seed, 5);
        assert_eq!(r.max_order, 2);
        assert_eq!(args.resolve(Some(3)).unwrap().max_order, 3);
    }

    #[test]
    fn unknown_config_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"kk": 1}"#).unwrap();
        let mut args = bare();
        args.config = Some(path);
        assert!(matches!(args.resolve(None), Err(CliError::Io(_))));
    }

    #[test]
    fn zero_ridge_rejected() {
        let mut args = bare();
        args.ridge = Some(TuningSpec::Value(0.0));
        assert!(matches!(args.resolve(None), Err(CliError::Usage(_))));
    }
}
