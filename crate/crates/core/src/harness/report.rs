//! Serializable estimation reports.

use serde::Serialize;

/// Metrics of the noise-blind baseline path (raw lags, bare recursion,
/// least squares). Fits can be arbitrarily negative and are never clamped.
#[derive(Debug, Clone, Serialize)]
pub struct BaselineReport {
    pub err_phi: f64,
    #[serde(rename = "fit_H")]
    pub fit_h: f64,
    pub fit_yl: f64,
    pub fit_ym: f64,
}

/// Single-run report of the full pipeline.
#[derive(Debug, Clone, Serialize)]
pub struct EstimationReport {
    pub err_phi: f64,
    #[serde(rename = "fit_H")]
    pub fit_h: f64,
    pub fit_yl: f64,
    pub fit_ym: f64,
    /// Shrink factor applied by the noise compensation.
    pub lambda_shrink: f64,
    pub iters_maxent: usize,
    pub iters_ml: usize,
    pub decrement_final: f64,
    pub stationarity: f64,
    pub seed: u64,
    pub ml_converged: bool,
    /// False when the estimated relation denominator was unstable and the
    /// reconstruction had to run unguarded.
    pub reconstruction_stable: bool,
    pub baseline: BaselineReport,
}

/// Monte-Carlo aggregate. The parameter-side numbers (`err_phi`, `fit_H`)
/// are evaluated on the averaged parameter estimates; the series fits are
/// per-trial averages.
#[derive(Debug, Clone, Serialize)]
pub struct McReport {
    pub trials: usize,
    pub succeeded: usize,
    pub err_phi: f64,
    #[serde(rename = "fit_H")]
    pub fit_h: f64,
    pub fit_yl: f64,
    pub fit_ym: f64,
    pub baseline: BaselineReport,
    /// Trials in which the baseline's parameter fit fell below the
    /// graphical pipeline's.
    pub baseline_below_count: usize,
    pub base_seed: u64,
    pub mean_lambda_shrink: f64,
}

/// One row of a sensitivity sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub n: usize,
    pub err_phi: f64,
    #[serde(rename = "fit_H")]
    pub fit_h: f64,
    pub fit_yl: f64,
    pub fit_ym: f64,
}
