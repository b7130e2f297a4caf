//! End-to-end estimation pipeline, metrics, Monte-Carlo aggregation, and the
//! flat-file formats consumed by the command-line tool.

mod config;
mod csvio;
mod pipeline;
mod report;

pub use config::{
    parse_n_list, parse_sigma_list, DegreesConfig, McConfig, PolyMatSchema, Resolved, RunConfig,
    SweepConfig, SystemConfig, SystemSpecConfig,
};
pub use csvio::{
    read_series_csv, series_to_csv, sidecar_json, sweep_to_csv, trace_to_csv, trials_to_csv,
    SeriesMeta,
};
pub use pipeline::{
    estimate_from_data, fit_h, fit_series, run_mc, run_single, sweep, McOutput, TrialOutput,
};
pub use report::{BaselineReport, EstimationReport, McReport, SweepRow};
