//! Runtime decision rules.
//!
//! The executor consults [`decide`] at every late-bind operator boundary. The
//! risk vector is kept componentwise: optimizer risk, the structured executor
//! signals and accelerator risk are each compared against their own
//! thresholds and never folded into a single number.
//!
//! Rule table, evaluated top-down, first match wins:
//!
//! 1. join, `estimate_ratio >= rho_join`, running nested loop -> hash join
//! 2. join, `memory_pressure >= mem_high`, running hash join whose working
//!    set exceeds the budget -> nested loop
//! 3. offloadable, on cpu, `N_obs >= offload_margin * N*` -> accelerator
//! 4. offloadable, on accelerator, `r_acc > 1` -> cpu
//! 5. a rule 1 or rule 3 trigger sits inside the re-evaluation band below its
//!    threshold and `r_opt >= opt_distrust` -> re-evaluate once
//! 6. keep
//!
//! `IndependentGates` runs rules 1-4 on executor-local quantities only, with
//! the planner's static break-even in place of the calibrated one.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::accel::BreakEvenOutcome;
use crate::engine::{ExecutionMode, RuntimeSignals};
use crate::error::{Error, Result};
use crate::planner::{OpKind, Variant};

/// Weights of the two optimizer-risk terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskWeights {
    pub variance: f64,
    pub staleness: f64,
}

impl Default for RiskWeights {
    fn default() -> Self {
        RiskWeights {
            variance: 1.0,
            staleness: 1.0,
        }
    }
}

/// Thresholds plus optimizer-risk weights: everything the hook consults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    pub thresholds: Thresholds,
    #[serde(default)]
    pub weights: RiskWeights,
}

/// Sentinel accelerator risk when no break-even exists.
pub const R_ACC_NO_BREAK_EVEN: f64 = f64::MAX;

/// `(R_opt, R_exec, R_acc)`. A component is `None` until the layer that
/// produces it has been observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskVector {
    pub r_opt: Option<f64>,
    pub r_exec: RuntimeSignals,
    pub r_acc: Option<f64>,
}

/// Per-kind offload gate derived from calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "gate", rename_all = "snake_case")]
pub enum DeviceGate {
    BreakEven { n_star: f64 },
    /// The accelerator never amortizes; never offload.
    NoBreakEven,
    /// Device rules switched off entirely.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub rho_join: f64,
    pub mem_high: f64,
    pub opt_distrust: f64,
    pub offload_margin: f64,
    /// Multiplicative width of the band below a trigger that answers
    /// `Reevaluate`; `None` disables the band.
    pub reevaluate_band: Option<f64>,
    #[serde(default)]
    pub offload: BTreeMap<OpKind, DeviceGate>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            rho_join: 10.0,
            mem_high: 0.8,
            opt_distrust: 1.0,
            offload_margin: 1.1,
            reevaluate_band: Some(1.2),
            offload: BTreeMap::new(),
        }
    }
}

impl Thresholds {
    /// Thresholds under which no rule can ever fire.
    pub fn inert() -> Self {
        Thresholds {
            rho_join: f64::INFINITY,
            mem_high: f64::INFINITY,
            opt_distrust: f64::INFINITY,
            offload_margin: f64::INFINITY,
            reevaluate_band: None,
            offload: OpKind::OFFLOADABLE
                .into_iter()
                .map(|k| (k, DeviceGate::Disabled))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rho_join", self.rho_join),
            ("mem_high", self.mem_high),
            ("opt_distrust", self.opt_distrust),
            ("offload_margin", self.offload_margin),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Validation(format!("threshold {name} must be > 0, got {v}")));
        }
        if !(self.rho_join > 1.0) {
            return Err(Error::Validation(format!("rho_join must be > 1, got {}", self.rho_join)));
        }
        if !(self.offload_margin >= 1.0) {
            return Err(Error::Validation(format!(
                "offload_margin must be >= 1, got {}",
                self.offload_margin
            )));
        }
        if let Some(band) = self.reevaluate_band {
            if !(band >= 1.0) {
                return Err(Error::Validation(format!("reevaluate_band must be >= 1, got {band}")));
            }
        }
        for (kind, gate) in &self.offload {
            if !kind.is_offloadable() {
                return Err(Error::Validation(format!("{kind} is not offloadable")));
            }
            if let DeviceGate::BreakEven { n_star } = gate {
                if !(*n_star > 0.0) {
                    return Err(Error::Validation(format!("{kind}: N* must be > 0, got {n_star}")));
                }
            }
        }
        Ok(())
    }

    pub fn is_calibrated(&self) -> bool {
        OpKind::OFFLOADABLE.iter().all(|k| self.offload.contains_key(k))
    }

    /// `offload_margin * N*`, or `None` when the kind never offloads.
    pub fn offload_threshold(&self, op: OpKind) -> Option<f64> {
        match self.offload.get(&op)? {
            DeviceGate::BreakEven { n_star } => Some(self.offload_margin * n_star),
            _ => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Thresholds = serde_json::from_str(&text)?;
        t.validate()?;
        Ok(t)
    }
}

/// What the executor knows about the node it is about to run.
#[derive(Debug, Clone, Copy)]
pub struct NodeContext<'a> {
    pub op: OpKind,
    pub current: Variant,
    pub variants: &'a [Variant],
    /// The hook already answered `Reevaluate` once for this node.
    pub rearmed: bool,
    /// Planner-side break-even for offloadable nodes.
    pub static_break_even: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "target", rename_all = "snake_case")]
pub enum Decision {
    Keep,
    SwitchVariant(Variant),
    Reevaluate,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Keep => f.write_str("keep"),
            Decision::SwitchVariant(v) => write!(f, "switch:{v}"),
            Decision::Reevaluate => f.write_str("reevaluate"),
        }
    }
}

fn in_band(value: f64, threshold: f64, band: Option<f64>) -> bool {
    match band {
        Some(width) if width > 1.0 => value >= threshold / width && value < threshold,
        _ => false,
    }
}

pub fn decide(
    urs: &RiskVector,
    node: &NodeContext<'_>,
    thresholds: &Thresholds,
    mode: ExecutionMode,
) -> Result<Decision> {
    let orchestrated = match mode {
        ExecutionMode::Baseline => return Ok(Decision::Keep),
        ExecutionMode::IndependentGates => false,
        ExecutionMode::Orchestrated => true,
    };
    if orchestrated && !thresholds.is_calibrated() {
        return Err(Error::Config(
            "orchestrated mode needs calibrated offload thresholds".into(),
        ));
    }
    let signals = &urs.r_exec;
    let n_obs = signals.observed_input_cardinality as f64;

    let decision = match node.op {
        OpKind::Join => {
            if node.current == Variant::NestedLoop && signals.estimate_ratio >= thresholds.rho_join {
                Decision::SwitchVariant(Variant::HashJoin)
            } else if node.current == Variant::HashJoin
                && signals.memory_pressure >= thresholds.mem_high
                && signals.over_budget
            {
                Decision::SwitchVariant(Variant::NestedLoop)
            } else if orchestrated
                && !node.rearmed
                && node.current == Variant::NestedLoop
                && in_band(signals.estimate_ratio, thresholds.rho_join, thresholds.reevaluate_band)
                && urs.r_opt.is_some_and(|r| r >= thresholds.opt_distrust)
            {
                Decision::Reevaluate
            } else {
                Decision::Keep
            }
        }
        op if op.is_offloadable() => {
            let gate = thresholds.offload.get(&op).copied();
            if gate == Some(DeviceGate::Disabled) {
                Decision::Keep
            } else if orchestrated {
                let trigger = thresholds.offload_threshold(op);
                match node.current {
                    Variant::Cpu if trigger.is_some_and(|t| n_obs >= t) => {
                        Decision::SwitchVariant(Variant::Accelerator)
                    }
                    Variant::Accelerator if urs.r_acc.is_some_and(|r| r > 1.0) => {
                        Decision::SwitchVariant(Variant::Cpu)
                    }
                    Variant::Cpu
                        if !node.rearmed
                            && trigger.is_some_and(|t| in_band(n_obs, t, thresholds.reevaluate_band))
                            && urs.r_opt.is_some_and(|r| r >= thresholds.opt_distrust) =>
                    {
                        Decision::Reevaluate
                    }
                    _ => Decision::Keep,
                }
            } else {
                let n_star = node.static_break_even;
                match node.current {
                    Variant::Cpu
                        if n_star.is_some_and(|n| n_obs >= thresholds.offload_margin * n) =>
                    {
                        Decision::SwitchVariant(Variant::Accelerator)
                    }
                    Variant::Accelerator if n_star.is_none_or(|n| n_obs < n) => {
                        Decision::SwitchVariant(Variant::Cpu)
                    }
                    _ => Decision::Keep,
                }
            }
        }
        _ => Decision::Keep,
    };

    Ok(decision)
}

/// Optional overrides measured by pilot runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotOverrides {
    pub rho_join: Option<f64>,
    pub mem_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub op_kind: OpKind,
    pub n_star_estimated: Option<f64>,
    pub n_star_observed: Option<f64>,
    pub relative_error: Option<f64>,
    pub offload_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rows: Vec<CalibrationRow>,
    pub rho_join: f64,
    pub mem_high: f64,
}

impl CalibrationReport {
    pub fn has_no_break_even(&self) -> bool {
        self.rows.iter().any(|r| r.n_star_estimated.is_none())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "op_kind",
            "n_star_estimated",
            "n_star_observed",
            "relative_error",
            "offload_threshold",
        ])?;
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| x.to_string());
        for r in &self.rows {
            w.write_record([
                r.op_kind.to_string(),
                opt(r.n_star_estimated),
                opt(r.n_star_observed),
                opt(r.relative_error),
                opt(r.offload_threshold),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rho_join={} mem_high={}", self.rho_join, self.mem_high);
        for r in &self.rows {
            match (r.n_star_estimated, r.n_star_observed, r.relative_error) {
                (Some(est), obs, err) => {
                    let _ = write!(s, "{:<10} N*_est={est:.1}", r.op_kind.name());
                    if let (Some(obs), Some(err)) = (obs, err) {
                        let _ = write!(s, " N*_obs={obs:.1} rel_err={:.2}%", err * 100.0);
                    }
                    if let Some(t) = r.offload_threshold {
                        let _ = write!(s, " offload_at={t:.1}");
                    }
                    s.push('\n');
                }
                (None, ..) => {
                    let _ = writeln!(s, "{:<10} no break-even: never offload", r.op_kind.name());
                }
            }
        }
        s
    }
}

/// Turns measured break-evens into thresholds. Unmeasured offloadable kinds
/// are an error; a kind without break-even gets a never-offload gate.
pub fn calibrate(
    break_evens: &BTreeMap<OpKind, BreakEvenOutcome>,
    pilot: Option<&PilotOverrides>,
    base: &Thresholds,
) -> Result<(Thresholds, CalibrationReport)> {
    if break_evens.is_empty() {
        return Err(Error::Empty("calibration needs at least one measured op kind"));
    }
    for kind in OpKind::OFFLOADABLE {
        if !break_evens.contains_key(&kind) {
            return Err(Error::Config(format!("no microbenchmark measurements for {kind}")));
        }
    }
    let mut t = base.clone();
    if let Some(p) = pilot {
        if let Some(r) = p.rho_join {
            t.rho_join = r;
        }
        if let Some(m) = p.mem_high {
            t.mem_high = m;
        }
    }
    let mut rows = Vec::new();
    for (&kind, outcome) in break_evens {
        let (gate, row) = match outcome {
            BreakEvenOutcome::Found(be) => (
                DeviceGate::BreakEven {
                    n_star: be.n_star_estimated,
                },
                CalibrationRow {
                    op_kind: kind,
                    n_star_estimated: Some(be.n_star_estimated),
                    n_star_observed: be.n_star_observed,
                    relative_error: be.relative_error,
                    offload_threshold: Some(t.offload_margin * be.n_star_estimated),
                },
            ),
            BreakEvenOutcome::NoBreakEven => (
                DeviceGate::NoBreakEven,
                CalibrationRow {
                    op_kind: kind,
                    n_star_estimated: None,
                    n_star_observed: None,
                    relative_error: None,
                    offload_threshold: None,
                },
            ),
        };
        t.offload.insert(kind, gate);
        rows.push(row);
    }
    t.validate()?;
    let report = CalibrationReport {
        rows,
        rho_join: t.rho_join,
        mem_high: t.mem_high,
    };
    Ok((t, report))
}
