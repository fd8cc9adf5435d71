//! Scenario runner and latency distributions.

pub mod report;
pub mod scenarios;

use serde::{Deserialize, Serialize};

use crate::accel::{outcomes, run_calibration, DeviceProfile};
use crate::engine::{execute, ClockMode, EngineConfig, ExecutionMode};
use crate::error::{Error, Result};
use crate::planner::plan;
use crate::policy::{calibrate, CalibrationReport, Policy, Thresholds};
use crate::rng::derive;

pub use report::{read_samples, report_emit};
pub use scenarios::{QueryInstance, Scenario, ScenarioConfig, ScenarioKind};

/// Nearest-rank percentile of sorted `samples`: the value at 1-based index
/// `ceil(p / 100 * n)`.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("percentile samples"));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::Validation(format!("percentile must be in (0, 100], got {p}")));
    }
    let n = samples.len();
    let rank = (p * n as f64 / 100.0).ceil() as usize;
    Ok(samples[rank.clamp(1, n) - 1])
}

/// Population coefficient of variation.
pub fn coefficient_of_variation(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean != 0.0).then(|| var.sqrt() / mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: ExecutionMode,
    /// Latency per query id; `None` marks a failed query.
    pub latencies: Vec<Option<f64>>,
    /// Successful latencies, ascending.
    pub sorted: Vec<f64>,
    /// `None` when every query failed.
    pub percentiles: Option<Percentiles>,
    pub failures: usize,
    /// `(latency, cumulative fraction)`, one point per sample.
    pub cdf: Vec<(f64, f64)>,
    pub decisions: usize,
    pub switches: usize,
}

impl ModeReport {
    pub fn from_latencies(mode: ExecutionMode, latencies: Vec<Option<f64>>) -> Result<Self> {
        let mut sorted: Vec<f64> = latencies.iter().flatten().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let failures = latencies.len() - sorted.len();
        let percentiles = if sorted.is_empty() {
            None
        } else {
            Some(Percentiles {
                p50: percentile(&sorted, 50.0)?,
                p95: percentile(&sorted, 95.0)?,
                p99: percentile(&sorted, 99.0)?,
                mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            })
        };
        let n = sorted.len();
        let cdf = sorted
            .iter()
            .enumerate()
            .map(|(i, &x)| (x, (i + 1) as f64 / n as f64))
            .collect();
        Ok(ModeReport {
            mode,
            latencies,
            sorted,
            percentiles,
            failures,
            cdf,
            decisions: 0,
            switches: 0,
        })
    }

    pub fn p(&self) -> &Percentiles {
        self.percentiles
            .as_ref()
            .expect("at least one query succeeded")
    }

    pub fn cv(&self) -> Option<f64> {
        coefficient_of_variation(&self.sorted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub scenario: String,
    pub seed: u64,
    pub queries: usize,
    pub clock: ClockMode,
    pub thresholds: Thresholds,
    pub modes: Vec<ModeReport>,
}

impl LatencyReport {
    pub fn mode(&self, mode: ExecutionMode) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

/// Calibrates offload thresholds against the engine's device.
pub fn calibrated_policy(
    device: &DeviceProfile,
    clock: ClockMode,
    reps: usize,
    seed: u64,
    base: &Thresholds,
) -> Result<(Policy, CalibrationReport)> {
    let cals = run_calibration(device, clock, reps, seed)?;
    let (thresholds, report) = calibrate(&outcomes(&cals), None, base)?;
    Ok((
        Policy {
            thresholds,
            ..Policy::default()
        },
        report,
    ))
}

/// Runs every query once per mode, sequentially. Memory exhaustion marks a
/// query failed in that mode; differing results across modes abort the run.
pub fn run_scenario(
    scenario: &Scenario,
    engine: &EngineConfig,
    policy: &Policy,
    clock: ClockMode,
) -> Result<LatencyReport> {
    let modes = &scenario.config.modes;
    let q = scenario.config.queries;
    let mut latencies = vec![Vec::with_capacity(q); modes.len()];
    let mut decisions = vec![0; modes.len()];
    let mut switches = vec![0; modes.len()];
    for id in 0..q {
        let inst = scenario.instance(id)?;
        let p = plan(&inst.query, &inst.stats, &scenario.planner_model)?;
        let seed = derive(scenario.config.seed, id as u64);
        let mut reference: Option<(ExecutionMode, i64)> = None;
        for (m, &mode) in modes.iter().enumerate() {
            match execute(&p, &inst.tables, mode, policy, engine, clock, seed) {
                Ok((result, trace)) => {
                    match reference {
                        Some((ref_mode, v)) if v != result.value => {
                            return Err(Error::ResultMismatch {
                                query: id,
                                detail: format!("{ref_mode} gave {v}, {mode} gave {}", result.value),
                            })
                        }
                        None => reference = Some((mode, result.value)),
                        _ => {}
                    }
                    latencies[m].push(Some(trace.total_latency));
                    decisions[m] += trace.decision_count;
                    switches[m] += trace.switch_count;
                }
                Err(Error::MemoryExhausted { .. }) => latencies[m].push(None),
                Err(e) => return Err(e),
            }
        }
    }
    let mut reports = Vec::with_capacity(modes.len());
    for (m, lat) in latencies.into_iter().enumerate() {
        let mut r = ModeReport::from_latencies(modes[m], lat)?;
        r.decisions = decisions[m];
        r.switches = switches[m];
        reports.push(r);
    }
    Ok(LatencyReport {
        scenario: scenario.name().to_string(),
        seed: scenario.config.seed,
        queries: q,
        clock,
        thresholds: policy.thresholds.clone(),
        modes: reports,
    })
}
