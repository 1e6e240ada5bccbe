use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MetricsError, RunMetrics, UtilizationBreakdown};
use crate::clock::ClockMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    /// Picks the format from a file extension; anything but `.json` is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") | Some("jsonl") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        }
    }
}

/// Everything reported for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub run_id: String,
    pub clock_mode: ClockMode,
    pub metrics: RunMetrics,
    pub utilization: UtilizationBreakdown,
}

/// One report row. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub n_nodes: u32,
    pub n_tasks: u64,
    pub tpt_s: f64,
    pub ts_per_s: f64,
    pub ttx_s: f64,
    pub rt_ovh_s: f64,
    pub total_ovh_s: f64,
    pub sched_cs: f64,
    pub launch_cs: f64,
    pub run_cs: f64,
    pub idle_cs: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRow {
    clock_mode: ClockMode,
    #[serde(flatten)]
    row: ReportRow,
}

fn core_s(core_ms: u64) -> f64 {
    core_ms as f64 / 1000.0
}

impl RunReport {
    pub fn row(&self) -> ReportRow {
        let m = &self.metrics;
        let u = &self.utilization;
        ReportRow {
            run_id: self.run_id.clone(),
            n_nodes: m.n_nodes,
            n_tasks: m.n_tasks,
            tpt_s: m.tpt_s,
            ts_per_s: m.ts_per_s,
            ttx_s: m.ttx_s,
            rt_ovh_s: m.runtime_overhead_s,
            total_ovh_s: m.total_overhead_s,
            sched_cs: core_s(u.scheduled_core_ms),
            launch_cs: core_s(u.launching_core_ms),
            run_cs: core_s(u.running_core_ms),
            idle_cs: core_s(u.idle_core_ms),
        }
    }
}

impl ReportRow {
    pub fn metrics(&self) -> RunMetrics {
        RunMetrics {
            tpt_s: self.tpt_s,
            ts_per_s: self.ts_per_s,
            ttx_s: self.ttx_s,
            runtime_overhead_s: self.rt_ovh_s,
            total_overhead_s: self.total_ovh_s,
            n_tasks: self.n_tasks,
            n_nodes: self.n_nodes,
        }
    }
}

fn io(e: impl std::fmt::Display) -> MetricsError {
    MetricsError::IoFailure(e.to_string())
}

/// Appends one row for `report` to `path`, creating the file (and, for CSV,
/// its header) if needed. JSON output is one object per line.
pub fn emit_report(report: &RunReport, format: ReportFormat, path: &Path) -> Result<(), MetricsError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    match format {
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
            w.serialize(report.row()).map_err(io)?;
            w.flush().map_err(io)?;
        }
        ReportFormat::Json => {
            let row = JsonRow {
                clock_mode: report.clock_mode,
                row: report.row(),
            };
            let line = serde_json::to_string(&row).map_err(io)?;
            writeln!(file, "{line}").map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_csv_report(path: &Path) -> Result<Vec<ReportRow>, MetricsError> {
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    r.deserialize().map(|row| row.map_err(io)).collect()
}

/// Reads a JSON-lines report back as (clock mode, row) pairs.
pub fn read_json_report(path: &Path) -> Result<Vec<(ClockMode, ReportRow)>, MetricsError> {
    let file = fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonRow = serde_json::from_str(&line).map_err(io)?;
        out.push((row.clock_mode, row.row));
    }
    Ok(out)
}
