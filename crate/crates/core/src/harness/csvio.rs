//! Flat-file formats: series CSV with a JSON sidecar, per-trial tables,
//! sweep tables, and solver traces.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::armax_ml::MlTraceRow;
use crate::error::{Error, Result};
use crate::harness::pipeline::TrialOutput;
use crate::harness::report::SweepRow;

/// Metadata written next to a simulated series so estimation can rebuild the
/// ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub seed: u64,
    pub n: usize,
    pub burn_in: usize,
    pub sigma: f64,
}

/// Series CSV: header `t,ch1..chD`, one row per step, `t` starting at 1.
pub fn series_to_csv(data: &DMatrix<f64>) -> String {
    let dim = data.ncols();
    let mut out = String::from("t");
    for ch in 1..=dim {
        out.push_str(&format!(",ch{ch}"));
    }
    out.push('\n');
    for t in 0..data.nrows() {
        out.push_str(&format!("{}", t + 1));
        for ch in 0..dim {
            out.push_str(&format!(",{}", data[(t, ch)]));
        }
        out.push('\n');
    }
    out
}

/// Parses a series CSV produced by [`series_to_csv`].
pub fn read_series_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Io("empty series file".into()))?;
    let dim = header.split(',').count().saturating_sub(1);
    if dim == 0 {
        return Err(Error::Io("series file has no channels".into()));
    }
    let mut values: Vec<f64> = Vec::new();
    let mut rows = 0;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::Io(format!(
                "row {} has {} fields, expected {}",
                rows + 2,
                fields.len(),
                dim + 1
            )));
        }
        for f in &fields[1..] {
            values.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Io(format!("bad number `{f}`")))?,
            );
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Io("series file has no data rows".into()));
    }
    Ok(DMatrix::from_row_slice(rows, dim, &values))
}

/// Serializes the sidecar metadata.
pub fn sidecar_json(meta: &SeriesMeta) -> String {
    serde_json::to_string_pretty(meta).expect("sidecar serializes")
}

/// Per-trial Monte-Carlo table: metrics for both paths, then one column per
/// free parameter estimate.
pub fn trials_to_csv(trials: &[Option<TrialOutput>], param_names: &[String]) -> String {
    let mut out = String::from(
        "trial,seed,ok,err_phi,fit_H,fit_yl,fit_ym,base_fit_H,base_fit_yl,base_fit_ym",
    );
    for name in param_names {
        out.push_str(&format!(",{name}"));
    }
    out.push('\n');
    for (i, t) in trials.iter().enumerate() {
        match t {
            Some(t) => {
                let r = &t.report;
                out.push_str(&format!(
                    "{},{},1,{},{},{},{},{},{},{}",
                    i,
                    r.seed,
                    r.err_phi,
                    r.fit_h,
                    r.fit_yl,
                    r.fit_ym,
                    r.baseline.fit_h,
                    r.baseline.fit_yl,
                    r.baseline.fit_ym
                ));
                for v in &t.params {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
            None => {
                out.push_str(&format!("{i},,0"));
                for _ in 0..7 + param_names.len() {
                    out.push(',');
                }
                out.push('\n');
            }
        }
    }
    out
}

/// Sweep table: one row per `(sigma, N)` cell.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("sigma,N,err_phi,fit_H,fit_yl,fit_ym\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.sigma, r.n, r.err_phi, r.fit_h, r.fit_yl, r.fit_ym
        ));
    }
    out
}

/// Solver trace table.
pub fn trace_to_csv(trace: &[MlTraceRow]) -> String {
    let mut out = String::from("iter,cost,decrement,step_size,feasibility,stationarity\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter, r.cost, r.decrement, r.step_size, r.feasibility, r.stationarity
        ));
    }
    out
}
