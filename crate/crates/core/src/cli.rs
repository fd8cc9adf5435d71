//! `latebind` command line: calibrate, run, report, gen.
//!
//! Effective settings resolve as flags over config file over defaults; every
//! command prints the resolved config and writes it next to its outputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::accel::{outcomes, run_calibration, write_fits_csv, write_measurements_csv};
use crate::bench::{
    calibrated_policy, read_samples, report::summary_table, report_emit, run_scenario, ModeReport, Scenario,
    ScenarioConfig, ScenarioKind,
};
use crate::engine::{execute, ClockMode, EngineConfig, ExecutionMode};
use crate::rng::derive;
use crate::error::{Error, Result};
use crate::planner::{plan, OpKind};
use crate::policy::{calibrate, Policy, RiskWeights, Thresholds};

pub const OUT_ENV: &str = "LATEBIND_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: String,
    pub seed: u64,
    pub queries: usize,
    pub modes: Vec<ExecutionMode>,
    pub clock: ClockMode,
    pub out: PathBuf,
    /// Thresholds file from `calibrate`; calibrates on the fly when absent.
    pub thresholds_file: Option<PathBuf>,
    pub thresholds: Thresholds,
    pub weights: RiskWeights,
    pub drift_fraction: f64,
    pub scale_factors: Vec<f64>,
    pub miscalibration: f64,
    pub left_rows: Option<u64>,
    pub engine: EngineConfig,
    pub calibration_reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = ScenarioConfig::default();
        RunConfig {
            scenario: ScenarioKind::StaleStats.name().into(),
            seed: s.seed,
            queries: s.queries,
            modes: s.modes,
            clock: ClockMode::default(),
            out: PathBuf::from("out"),
            thresholds_file: None,
            thresholds: Thresholds::default(),
            weights: RiskWeights::default(),
            drift_fraction: s.drift_fraction,
            scale_factors: s.scale_factors,
            miscalibration: s.miscalibration,
            left_rows: s.left_rows,
            engine: EngineConfig::default(),
            calibration_reps: 5,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }

    pub fn scenario_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            queries: self.queries,
            seed: self.seed,
            modes: self.modes.clone(),
            drift_fraction: self.drift_fraction,
            scale_factors: self.scale_factors.clone(),
            miscalibration: self.miscalibration,
            left_rows: self.left_rows,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ScenarioKind::parse(&self.scenario)?;
        self.scenario_config().validate()?;
        self.thresholds.validate()?;
        self.engine.device.validate()?;
        if let ClockMode::Simulated { sigma } = self.clock {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::Validation(format!("clock sigma must be >= 0, got {sigma}")));
            }
        }
        if self.calibration_reps < 1 {
            return Err(Error::Validation("calibration_reps must be >= 1".into()));
        }
        if self.engine.batch_size < 1 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "latebind", version, about = "Late-binding query engine and tail-latency benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Microbenchmark both devices, fit cost lines and write offload thresholds.
    Calibrate(CalibrateArgs),
    /// Run a scenario under each execution mode and write latency reports.
    Run(RunArgs),
    /// Compare samples.csv files; the first is the reference.
    Report(ReportArgs),
    /// Dump one query instance's tables, statistics, plan and per-mode traces.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON config file (unknown keys are rejected).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory [env: LATEBIND_OUT, default: out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Lognormal noise shape of the simulated clock.
    #[arg(long, conflicts_with = "wall")]
    pub sigma: Option<f64>,
    /// Charge measured wall time instead of the simulated clock.
    #[arg(long)]
    pub wall: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Repetitions per microbenchmark size.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Accelerator setup cost for filter and aggregate.
    #[arg(long)]
    pub accel_setup: Option<f64>,
    /// Accelerator per-item cost (all compute, no transfer).
    #[arg(long)]
    pub accel_per_item: Option<f64>,
    /// CPU per-item cost for filter and aggregate.
    #[arg(long)]
    pub cpu_per_item: Option<f64>,
    #[arg(long)]
    pub offload_margin: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// input_scale_shift | stale_stats | control | break_even
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub queries: Option<usize>,
    /// Comma-separated subset of baseline,independent_gates,orchestrated.
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<String>>,
    /// Thresholds written by `calibrate`.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    #[arg(long)]
    pub rho_join: Option<f64>,
    #[arg(long)]
    pub mem_high: Option<f64>,
    #[arg(long)]
    pub opt_distrust: Option<f64>,
    #[arg(long)]
    pub offload_margin: Option<f64>,
    /// Width of the re-evaluation band below each trigger; 1 disables it.
    #[arg(long)]
    pub reevaluate_band: Option<f64>,
    #[arg(long)]
    pub drift_fraction: Option<f64>,
    #[arg(long)]
    pub miscalibration: Option<f64>,
    #[arg(long)]
    pub left_rows: Option<u64>,
    #[arg(long)]
    pub memory_budget: Option<u64>,
    /// Fail queries that exceed the memory budget instead of spilling.
    #[arg(long)]
    pub no_spill: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub samples: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub scenario: Option<String>,
    /// Query index within the scenario.
    #[arg(long, default_value_t = 0)]
    pub query: usize,
}

fn resolve_common(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let file_sets_out = common
        .config
        .as_ref()
        .and_then(|p| fs::read_to_string(p).ok())
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .is_some_and(|v| v.get("out").is_some());
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    } else if !file_sets_out {
        if let Some(env) = std::env::var_os(OUT_ENV) {
            cfg.out = PathBuf::from(env);
        }
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.wall {
        cfg.clock = ClockMode::Wall;
    } else if let Some(sigma) = common.sigma {
        cfg.clock = ClockMode::Simulated { sigma };
    }
    Ok(cfg)
}

fn banner(cmd: &str, cfg: &RunConfig) -> Result<String> {
    Ok(format!("latebind {cmd} effective config:\n{}\n", serde_json::to_string_pretty(cfg)?))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&path, e))
}

fn write_with<F: FnOnce(&mut Vec<u8>) -> Result<()>>(path: &Path, f: F) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn resolve_calibrate(args: &CalibrateArgs) -> Result<RunConfig> {
    let mut cfg = resolve_common(&args.common)?;
    if let Some(r) = args.reps {
        cfg.calibration_reps = r;
    }
    if let Some(m) = args.offload_margin {
        cfg.thresholds.offload_margin = m;
    }
    for op in OpKind::OFFLOADABLE {
        let p = cfg.engine.device.primitive_mut(op).expect("offloadable");
        if let Some(s) = args.accel_setup {
            p.accelerator.setup = s;
        }
        if let Some(a) = args.accel_per_item {
            p.accelerator.compute = a;
            p.accelerator.transfer = 0.0;
        }
        if let Some(c) = args.cpu_per_item {
            p.cpu.per_item = c;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes `<out>/calibration/{thresholds.json, measurements.csv, fits.csv,
/// calibration.csv, summary.txt, config.json}`. Returns exit code 1 when an
/// offloadable kind has no break-even; the thresholds file is still written
/// with a never-offload gate for it.
pub fn cmd_calibrate(cfg: &RunConfig, log: &mut dyn std::io::Write) -> Result<i32> {
    let _ = write!(log, "{}", banner("calibrate", cfg)?);
    let dir = cfg.out.join("calibration");
    write_config(&dir, cfg)?;
    let cals = run_calibration(&cfg.engine.device, cfg.clock, cfg.calibration_reps, cfg.seed)?;
    let (thresholds, report) = calibrate(&outcomes(&cals), None, &cfg.thresholds)?;
    thresholds.save(&dir.join("thresholds.json"))?;
    write_with(&dir.join("measurements.csv"), |b| write_measurements_csv(&cals, b))?;
    write_with(&dir.join("fits.csv"), |b| write_fits_csv(&cals, b))?;
    let csv = report.to_csv()?;
    fs::write(dir.join("calibration.csv"), csv).map_err(|e| Error::io(dir.join("calibration.csv"), e))?;
    let summary = report.summary();
    fs::write(dir.join("summary.txt"), &summary).map_err(|e| Error::io(dir.join("summary.txt"), e))?;
    let _ = write!(log, "{summary}");
    let _ = writeln!(log, "thresholds written to {}", dir.join("thresholds.json").display());
    if report.has_no_break_even() {
        let kinds: Vec<String> = report
            .rows
            .iter()
            .filter(|r| r.n_star_estimated.is_none())
            .map(|r| r.op_kind.to_string())
            .collect();
        let _ = writeln!(
            log,
            "warning: no break-even for {}; the accelerator never amortizes and will not be used",
            kinds.join(", ")
        );
        return Ok(1);
    }
    Ok(0)
}

pub fn resolve_run(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = resolve_common(&args.common)?;
    if let Some(s) = &args.scenario {
        cfg.scenario = s.clone();
    }
    if let Some(q) = args.queries {
        cfg.queries = q;
    }
    if let Some(modes) = &args.modes {
        cfg.modes = modes
            .iter()
            .map(|m| ExecutionMode::parse(m).ok_or_else(|| Error::Validation(format!("unknown mode `{m}`"))))
            .collect::<Result<_>>()?;
    }
    if let Some(t) = &args.thresholds {
        cfg.thresholds_file = Some(t.clone());
    }
    if let Some(path) = &cfg.thresholds_file {
        cfg.thresholds = Thresholds::load(path)?;
    }
    let t = &mut cfg.thresholds;
    if let Some(v) = args.rho_join {
        t.rho_join = v;
    }
    if let Some(v) = args.mem_high {
        t.mem_high = v;
    }
    if let Some(v) = args.opt_distrust {
        t.opt_distrust = v;
    }
    if let Some(v) = args.offload_margin {
        t.offload_margin = v;
    }
    if let Some(v) = args.reevaluate_band {
        t.reevaluate_band = (v > 1.0).then_some(v);
    }
    if let Some(v) = args.drift_fraction {
        cfg.drift_fraction = v;
    }
    if let Some(v) = args.miscalibration {
        cfg.miscalibration = v;
    }
    if let Some(v) = args.left_rows {
        cfg.left_rows = Some(v);
    }
    if let Some(v) = args.memory_budget {
        cfg.engine.memory_budget_bytes = v;
    }
    if args.no_spill {
        cfg.engine.spill_enabled = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Resolves the policy for `cfg`, calibrating against the engine device when
/// orchestrated mode needs thresholds that are not yet calibrated.
pub fn resolve_policy(cfg: &RunConfig, log: &mut dyn std::io::Write) -> Result<Policy> {
    let needs = cfg.modes.contains(&ExecutionMode::Orchestrated) && !cfg.thresholds.is_calibrated();
    if !needs {
        return Ok(Policy {
            thresholds: cfg.thresholds.clone(),
            weights: cfg.weights,
        });
    }
    let (mut policy, report) = calibrated_policy(
        &cfg.engine.device,
        cfg.clock,
        cfg.calibration_reps,
        cfg.seed,
        &cfg.thresholds,
    )?;
    policy.weights = cfg.weights;
    let _ = write!(log, "calibrated offload thresholds:\n{}", report.summary());
    Ok(policy)
}

pub fn cmd_run(cfg: &RunConfig, log: &mut dyn std::io::Write) -> Result<i32> {
    let _ = write!(log, "{}", banner("run", cfg)?);
    let kind = ScenarioKind::parse(&cfg.scenario)?;
    let policy = resolve_policy(cfg, log)?;
    let scenario = Scenario::new(kind, cfg.scenario_config())?;
    let report = run_scenario(&scenario, &cfg.engine, &policy, cfg.clock)?;
    report_emit(&report, &cfg.out)?;
    let dir = cfg.out.join(&report.scenario);
    write_config(&dir, cfg)?;
    let path = dir.join("thresholds.json");
    policy.thresholds.save(&path)?;
    let _ = write!(log, "{}", summary_table(&report));
    let _ = writeln!(log, "reports written to {}", dir.display());
    Ok(0)
}

/// Prints p50/p95/p99 per file and the reference's percentiles over each.
pub fn cmd_report(paths: &[PathBuf], log: &mut dyn std::io::Write) -> Result<i32> {
    let reports: Vec<(String, ModeReport)> = paths
        .iter()
        .map(|p| read_samples(p).map(|r| (p.display().to_string(), r)))
        .collect::<Result<_>>()?;
    let (_, reference) = &reports[0];
    let Some(rp) = reference.percentiles.clone() else {
        return Err(Error::Validation(format!("{}: no successful samples", paths[0].display())));
    };
    let _ = writeln!(
        log,
        "{:<18} {:>12} {:>12} {:>12} {:>8} {:>8} {:>8}  file",
        "mode", "p50", "p95", "p99", "r50", "r95", "r99"
    );
    for (path, r) in &reports {
        match &r.percentiles {
            Some(p) => {
                let _ = writeln!(
                    log,
                    "{:<18} {:>12.1} {:>12.1} {:>12.1} {:>8.2} {:>8.2} {:>8.2}  {path}",
                    r.mode.name(),
                    p.p50,
                    p.p95,
                    p.p99,
                    rp.p50 / p.p50,
                    rp.p95 / p.p95,
                    rp.p99 / p.p99
                );
            }
            None => {
                let _ = writeln!(log, "{:<18} all {} queries failed  {path}", r.mode.name(), r.failures);
            }
        }
    }
    Ok(0)
}

pub fn cmd_gen(cfg: &RunConfig, query: usize, log: &mut dyn std::io::Write) -> Result<i32> {
    let _ = write!(log, "{}", banner("gen", cfg)?);
    let kind = ScenarioKind::parse(&cfg.scenario)?;
    let scenario = Scenario::new(kind, cfg.scenario_config())?;
    let inst = scenario.instance(query)?;
    let dir = cfg.out.join("gen").join(kind.name()).join(format!("q{query}"));
    write_config(&dir, cfg)?;
    for (name, table) in inst.tables.iter() {
        let path = dir.join(format!("{name}.csv"));
        write_with(&path, |b| table.write_csv(b))?;
    }
    let stats: BTreeMap<_, _> = inst.stats.iter().collect();
    let path = dir.join("stats.json");
    fs::write(&path, serde_json::to_string_pretty(&stats)? + "\n").map_err(|e| Error::io(&path, e))?;
    let p = plan(&inst.query, &inst.stats, &scenario.planner_model)?;
    let explain = p.explain();
    let path = dir.join("plan.txt");
    fs::write(&path, &explain).map_err(|e| Error::io(&path, e))?;
    let _ = writeln!(log, "query {query} ({})", inst.label);
    let _ = write!(log, "{explain}");
    let policy = resolve_policy(cfg, log)?;
    let seed = derive(cfg.seed, query as u64);
    for &mode in &cfg.modes {
        let (result, trace) = execute(&p, &inst.tables, mode, &policy, &cfg.engine, cfg.clock, seed)?;
        let path = dir.join(format!("trace_{mode}.csv"));
        write_with(&path, |b| trace.write_csv(b))?;
        let _ = writeln!(
            log,
            "{mode}: value={} latency={} decisions={} switches={}",
            result.value, trace.total_latency, trace.decision_count, trace.switch_count
        );
        for r in &trace.records {
            let _ = writeln!(
                log,
                "  node {} {:<9} {:>11} -> {:<11} n_est={:.1} n_obs={} {} cost={:.1}",
                r.node_id, r.op.name(), r.planned_variant.name(), r.executed_variant.name(), r.n_est, r.n_obs, r.decision, r.charged_cost
            );
        }
    }
    let _ = writeln!(log, "written to {}", dir.display());
    Ok(0)
}

/// Exit code for an error: 2 for result-equality violations, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ResultMismatch { .. } => 2,
        _ => 1,
    }
}

pub fn run_cli<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            if code == 0 {
                let _ = write!(out, "{e}");
            } else {
                let _ = write!(err, "{e}");
            }
            return code;
        }
    };
    let result = match &cli.command {
        Command::Calibrate(a) => resolve_calibrate(a).and_then(|c| cmd_calibrate(&c, out)),
        Command::Run(a) => resolve_run(a).and_then(|c| cmd_run(&c, out)),
        Command::Report(a) => cmd_report(&a.samples, out),
        Command::Gen(a) => resolve_common(&a.common)
            .map(|mut c| {
                if let Some(s) = &a.scenario {
                    c.scenario = s.clone();
                }
                c
            })
            .and_then(|c| {
                c.validate()?;
                cmd_gen(&c, a.query, out)
            }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 4, "sede": 5}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Validation(_))));
        fs::write(&path, r#"{"seed": 4}"#).unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.queries, 200);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 4, "queries": 10, "scenario": "control"}"#).unwrap();
        let cli = Cli::try_parse_from([
            "latebind",
            "run",
            "--config",
            path.to_str().unwrap(),
            "--seed",
            "9",
            "--rho-join",
            "4",
            "--modes",
            "baseline,orchestrated",
            "--out",
            "/tmp/x",
        ])
        .unwrap();
        let Command::Run(args) = cli.command else { panic!() };
        let c = resolve_run(&args).unwrap();
        assert_eq!((c.seed, c.queries, c.scenario.as_str()), (9, 10, "control"));
        assert_eq!(c.thresholds.rho_join, 4.0);
        assert_eq!(c.modes, vec![ExecutionMode::Baseline, ExecutionMode::Orchestrated]);
        assert_eq!(c.out, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn invalid_values_are_validation_errors() {
        let cli = Cli::try_parse_from(["latebind", "run", "--scenario", "bogus"]).unwrap();
        let Command::Run(args) = cli.command else { panic!() };
        assert!(matches!(resolve_run(&args), Err(Error::Validation(_))));
        let cli = Cli::try_parse_from(["latebind", "run", "--rho-join", "0.5"]).unwrap();
        let Command::Run(args) = cli.command else { panic!() };
        assert!(matches!(resolve_run(&args), Err(Error::Validation(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Validation("x".into())), 1);
        assert_eq!(
            exit_code(&Error::ResultMismatch {
                query: 0,
                detail: String::new()
            }),
            2
        );
    }
}
