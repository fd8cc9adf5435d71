//! Report files.
//!
//! Layout under the output root:
//!
//! ```text
//! <scenario>/summary.txt                 all modes side by side
//! <scenario>/<mode>/samples.csv          mode,query_id,latency,failed
//! <scenario>/<mode>/cdf.csv              latency,cumulative_fraction
//! <scenario>/<mode>/summary.txt
//! ```
//!
//! `latency` is empty on failed rows. Floats use shortest round-trip
//! formatting, so identical reports produce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{LatencyReport, ModeReport};
use crate::engine::ExecutionMode;
use crate::error::{Error, Result};

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn samples_csv(m: &ModeReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["mode", "query_id", "latency", "failed"])?;
    for (id, lat) in m.latencies.iter().enumerate() {
        w.write_record([
            m.mode.name().to_string(),
            id.to_string(),
            lat.map_or_else(String::new, |x| x.to_string()),
            u8::from(lat.is_none()).to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))
}

pub fn cdf_csv(m: &ModeReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["latency", "cumulative_fraction"])?;
    for (x, f) in &m.cdf {
        w.write_record([x.to_string(), f.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))
}

fn mode_summary(report: &LatencyReport, m: &ModeReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario: {}", report.scenario);
    let _ = writeln!(s, "mode: {}", m.mode);
    let _ = writeln!(s, "seed: {}", report.seed);
    let _ = writeln!(s, "clock: {}", serde_json::to_string(&report.clock).unwrap_or_default());
    let _ = writeln!(s, "queries: {}", report.queries);
    let _ = writeln!(s, "samples: {}", m.sorted.len());
    let _ = writeln!(s, "failures: {}", m.failures);
    match &m.percentiles {
        Some(p) => {
            let _ = writeln!(s, "p50: {}", p.p50);
            let _ = writeln!(s, "p95: {}", p.p95);
            let _ = writeln!(s, "p99: {}", p.p99);
            let _ = writeln!(s, "mean: {}", p.mean);
        }
        None => s.push_str("p50: none\np95: none\np99: none\nmean: none\n"),
    }
    if let Some(cv) = m.cv() {
        let _ = writeln!(s, "cv: {cv}");
    }
    let _ = writeln!(s, "decisions: {}", m.decisions);
    let _ = writeln!(s, "switches: {}", m.switches);
    let _ = writeln!(
        s,
        "thresholds: {}",
        serde_json::to_string(&report.thresholds).unwrap_or_default()
    );
    s
}

/// Side-by-side table; ratios are the first mode's percentile over each
/// mode's.
pub fn summary_table(report: &LatencyReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario {} (seed {}, {} queries)", report.scenario, report.seed, report.queries);
    let _ = writeln!(
        s,
        "{:<18} {:>12} {:>12} {:>12} {:>12} {:>8} {:>9} {:>9}",
        "mode", "p50", "p95", "p99", "mean", "failed", "p99 ratio", "switches"
    );
    let reference = report.modes.first().and_then(|m| m.percentiles.as_ref());
    for m in &report.modes {
        match &m.percentiles {
            Some(p) => {
                let ratio = reference.map_or(f64::NAN, |r| r.p99 / p.p99);
                let _ = writeln!(
                    s,
                    "{:<18} {:>12.1} {:>12.1} {:>12.1} {:>12.1} {:>8} {:>9.2} {:>9}",
                    m.mode.name(),
                    p.p50,
                    p.p95,
                    p.p99,
                    p.mean,
                    m.failures,
                    ratio,
                    m.switches
                );
            }
            None => {
                let _ = writeln!(s, "{:<18} all {} queries failed", m.mode.name(), m.failures);
            }
        }
    }
    s
}

/// Writes the report tree and returns the files written.
pub fn report_emit(report: &LatencyReport, out: &Path) -> Result<Vec<PathBuf>> {
    let root = out.join(&report.scenario);
    let mut written = Vec::new();
    for m in &report.modes {
        let dir = root.join(m.mode.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (name, bytes) in [
            ("samples.csv", samples_csv(m)?),
            ("cdf.csv", cdf_csv(m)?),
            ("summary.txt", mode_summary(report, m).into_bytes()),
        ] {
            let path = dir.join(name);
            write_file(&path, &bytes)?;
            written.push(path);
        }
    }
    let path = root.join("summary.txt");
    write_file(&path, summary_table(report).as_bytes())?;
    written.push(path);
    Ok(written)
}

#[derive(Debug, Deserialize)]
struct SampleRow {
    mode: String,
    query_id: usize,
    latency: Option<f64>,
    failed: u8,
}

/// Reads a `samples.csv` back into a mode report.
pub fn read_samples(path: &Path) -> Result<ModeReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let mut mode = None;
    let mut latencies = Vec::new();
    for row in rd.deserialize() {
        let row: SampleRow = row?;
        let m = ExecutionMode::parse(&row.mode)
            .ok_or_else(|| Error::Validation(format!("{}: unknown mode `{}`", path.display(), row.mode)))?;
        if *mode.get_or_insert(m) != m {
            return Err(Error::Validation(format!("{}: mixed modes", path.display())));
        }
        if row.query_id != latencies.len() {
            return Err(Error::Validation(format!(
                "{}: query ids must be 0.. in order, found {}",
                path.display(),
                row.query_id
            )));
        }
        latencies.push(if row.failed != 0 { None } else { row.latency });
    }
    let mode = mode.ok_or(Error::Empty("samples file"))?;
    ModeReport::from_latencies(mode, latencies)
}
