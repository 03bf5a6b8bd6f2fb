//! Estimation, identification and forecasting for CP-factor models of
//! matrix-valued time series,
//!
//! ```text
//! Y_t = A X_t B' + e_t,    X_t = diag(x_t),
//! ```
//!
//! where `A` (p x d) and `B` (q x d) have unit columns and may be rank
//! deficient. The estimator reduces `Y_t` onto the column spaces of `A` and
//! `B`, extracts the factor space of the reduced series, and recovers the
//! individual loading pairs through a non-orthogonal joint diagonalization
//! built from the null space of a quadratic rank-one system.
//!
//! Module map:
//!
//! * [`series`]: containers, vectorization, lagged covariances, thresholding.
//! * [`rank`]: ridged eigenvalue-ratio rank estimators.
//! * [`subspace`]: `M1`, `M2`, `M` and their leading eigenspaces.
//! * [`psi`]: the rank-one tensor, `Omega`, kernel bases and the basis rotation.
//! * [`jointdiag`]: fast Frobenius joint diagonalization.
//! * [`pipeline`]: the full estimator and the loading error metric.
//! * [`forecast`]: VAR fitting and the two prediction procedures.
//! * [`sim`]: scenario generators and the replication harness.

pub mod error;
pub mod forecast;
pub mod jointdiag;
pub(crate) mod linalg;
pub mod pipeline;
pub mod psi;
pub mod rank;
pub mod series;
pub mod sim;
pub mod subspace;

pub use error::{Error, Result};
pub use forecast::{ForecastMethod, ForecastOutput, VarModel};
pub use pipeline::{estimate, varpi, CpEstimate, EstimatorConfig, Tuning};
pub use series::{MatrixSeries, ProjectionSeries};
pub use sim::{GroundTruth, Scenario, ScenarioConfig};
