//! CSV persistence for run records and check reports.
//!
//! Floats are written as `{:.16e}` (17 significant digits), which
//! round-trips every `f64` and keeps files byte-reproducible. Wall-clock
//! timings live in a separate file so the metrics file is deterministic.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::trainer::{RunRecord, RunRow};
use crate::verify::CheckReport;

pub const METRICS_HEADER: [&str; 11] = [
    "step",
    "epoch",
    "mean_reward",
    "p_hat_mean",
    "p_hat_min",
    "p_hat_max",
    "degenerate_fraction",
    "grad_norm",
    "lr",
    "cumulative_rollouts",
    "exact_success",
];

pub const CHECKS_HEADER: [&str; 9] = [
    "check",
    "parameters",
    "label",
    "estimate",
    "target",
    "std_error",
    "tolerance",
    "row_status",
    "check_status",
];

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(path)?)
}

pub fn write_metrics(path: &Path, record: &RunRecord) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in &record.rows {
        w.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            fmt_f64(r.mean_reward),
            fmt_f64(r.p_hat_mean),
            fmt_f64(r.p_hat_min),
            fmt_f64(r.p_hat_max),
            fmt_f64(r.degenerate_fraction),
            fmt_f64(r.grad_norm),
            fmt_f64(r.lr),
            r.cumulative_rollouts.to_string(),
            fmt_f64(r.exact_success),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing(path: &Path, record: &RunRecord) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["step", "elapsed_secs"])?;
    for r in &record.rows {
        w.write_record([r.step.to_string(), fmt_f64(r.elapsed_secs)])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a metrics file written by [`write_metrics`]. Rows come back with
/// `elapsed_secs = 0`.
pub fn read_metrics(path: &Path) -> Result<RunRecord> {
    let mut rdr = csv::ReaderBuilder::new().from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(LabError::invalid(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |col: usize| {
            LabError::invalid(format!(
                "{}: row {}: cannot parse {}",
                path.display(),
                i + 1,
                METRICS_HEADER[col]
            ))
        };
        let int = |col: usize| rec[col].parse::<u64>().map_err(|_| bad(col));
        let float = |col: usize| rec[col].parse::<f64>().map_err(|_| bad(col));
        rows.push(RunRow {
            step: int(0)? as usize,
            epoch: int(1)? as usize,
            mean_reward: float(2)?,
            p_hat_mean: float(3)?,
            p_hat_min: float(4)?,
            p_hat_max: float(5)?,
            degenerate_fraction: float(6)?,
            grad_norm: float(7)?,
            lr: float(8)?,
            cumulative_rollouts: int(9)?,
            exact_success: float(10)?,
            elapsed_secs: 0.0,
        });
    }
    if rows.is_empty() {
        return Err(LabError::invalid(format!("{}: no rows", path.display())));
    }
    Ok(RunRecord { rows })
}

pub fn write_checks(path: &Path, reports: &[CheckReport]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(CHECKS_HEADER)?;
    for rep in reports {
        let params = rep.parameter_string();
        let status = rep.status().as_str();
        for r in &rep.rows {
            w.write_record([
                rep.name.as_str(),
                params.as_str(),
                r.label.as_str(),
                &fmt_f64(r.estimate),
                &fmt_f64(r.target),
                &fmt_f64(r.std_error),
                &fmt_f64(r.tolerance),
                r.status.as_str(),
                status,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `header` and `rows` of already formatted fields.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
