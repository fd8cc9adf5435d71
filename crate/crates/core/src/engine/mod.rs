//! Operator-at-a-time executor with a decision hook at late-bind boundaries.
//!
//! Every late-bind node starts from a fully materialized input, so the
//! observed cardinality is exact when the hook fires. A switch discards no
//! work: the new variant starts from the same input. `Reevaluate` re-arms the
//! hook once; the node runs its first batch on the current variant and the
//! hook fires again before the remainder (for joins the second look also sees
//! the probe side).

pub mod clock;
pub mod ops;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use clock::ClockMode;
use ops::RowId;

use crate::datagen::Table;
use crate::error::{Error, Result};
use crate::planner::{
    cost, Aggregate, AnnotatedPlan, Cardinalities, CostModel, NodeKind, OpKind, PlanNode, Side, Variant,
};
use crate::policy::{decide, Decision, DeviceGate, NodeContext, Policy, RiskVector, R_ACC_NO_BREAK_EVEN};
use crate::rng::derive;
use crate::stats::optimizer_risk;

/// Bytes per materialized row id.
pub const ROW_BYTES: u64 = 8;
/// Bytes per hash-table entry (key, row id, bucket overhead).
pub const HASH_ENTRY_BYTES: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    Baseline,
    IndependentGates,
    Orchestrated,
}

impl ExecutionMode {
    pub const ALL: [ExecutionMode; 3] = [
        ExecutionMode::Baseline,
        ExecutionMode::IndependentGates,
        ExecutionMode::Orchestrated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExecutionMode::Baseline => "baseline",
            ExecutionMode::IndependentGates => "independent_gates",
            ExecutionMode::Orchestrated => "orchestrated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl fmt::Display for ExecutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Executor-side risk signals at a late-bind boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeSignals {
    pub observed_input_cardinality: u64,
    /// `N_obs / max(1, N_est)`.
    pub estimate_ratio: f64,
    /// Working set of the current variant over the budget, clamped to 1.
    pub memory_pressure: f64,
    /// The unclamped working set exceeds the budget.
    pub over_budget: bool,
    /// Charged cost so far over the planner's predicted cost so far.
    pub elapsed_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    /// What the hardware actually costs; the simulated clock charges this.
    pub device: CostModel,
    pub memory_budget_bytes: u64,
    pub spill_multiplier: f64,
    pub spill_enabled: bool,
    pub batch_size: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            device: CostModel::default(),
            memory_budget_bytes: 64 * 1024 * 1024,
            spill_multiplier: 3.0,
            spill_enabled: true,
            batch_size: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryResult {
    pub value: i64,
    pub join_rows: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: usize,
    pub op: OpKind,
    pub planned_variant: Variant,
    pub executed_variant: Variant,
    pub n_est: f64,
    pub n_obs: u64,
    /// `none` off late-bind nodes; otherwise `keep`, `switch:<variant>`, or
    /// `reevaluate>` followed by the second answer.
    pub decision: String,
    pub charged_cost: f64,
    pub spilled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub mode: ExecutionMode,
    pub records: Vec<NodeRecord>,
    pub total_latency: f64,
    /// Hook invocations, re-armed ones included.
    pub decision_count: usize,
    pub switch_count: usize,
}

impl ExecutionTrace {
    pub const CSV_HEADER: [&'static str; 9] = [
        "node_id",
        "op",
        "planned_variant",
        "executed_variant",
        "n_est",
        "n_obs",
        "decision",
        "charged_cost",
        "spilled",
    ];

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.node_id.to_string(),
                r.op.to_string(),
                r.planned_variant.to_string(),
                r.executed_variant.to_string(),
                r.n_est.to_string(),
                r.n_obs.to_string(),
                r.decision.clone(),
                r.charged_cost.to_string(),
                (r.spilled as u8).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

enum Materialized {
    Rows(Vec<RowId>),
    Pairs(Vec<(RowId, RowId)>),
    Value(i64),
}

struct Run<'a> {
    plan: &'a AnnotatedPlan,
    left: &'a Table,
    right: &'a Table,
    mode: ExecutionMode,
    policy: &'a Policy,
    config: &'a EngineConfig,
    clock: ClockMode,
    seed: u64,
    charged_so_far: f64,
    predicted_so_far: f64,
    trace: ExecutionTrace,
}

/// Unit of work a variant performs on (part of) a node's input.
#[derive(Clone, Copy)]
enum Part {
    All,
    Head(usize),
    Tail(usize),
}

impl Part {
    fn slice<T>(self, v: &[T]) -> &[T] {
        match self {
            Part::All => v,
            Part::Head(n) => &v[..n.min(v.len())],
            Part::Tail(n) => &v[n.min(v.len())..],
        }
    }
}

impl<'a> Run<'a> {
    fn table(&self, side: Side) -> &'a Table {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
        }
    }

    fn current_generation(&self, table: &str) -> Result<u64> {
        [self.left, self.right]
            .into_iter()
            .find(|t| t.name() == table)
            .map(Table::generation)
            .ok_or_else(|| Error::MissingTable(table.to_string()))
    }

    fn working_set(&self, node: &PlanNode, variant: Variant, n: u64, probe: u64) -> u64 {
        match node.op() {
            OpKind::Join => {
                let inputs = (n + probe) * ROW_BYTES;
                if variant == Variant::HashJoin {
                    inputs + n * HASH_ENTRY_BYTES
                } else {
                    inputs
                }
            }
            OpKind::Aggregate => n * 2 * ROW_BYTES,
            _ => n * ROW_BYTES,
        }
    }

    fn observe(&self, node: &PlanNode, n_obs: u64, probe_obs: Option<u64>, probe_ratio: bool, variant: Variant) -> RuntimeSignals {
        let ws = self.working_set(node, variant, n_obs, probe_obs.unwrap_or(0));
        let deviation = if self.predicted_so_far > 0.0 {
            self.charged_so_far / self.predicted_so_far
        } else {
            1.0
        };
        let probe = if probe_ratio { probe_obs } else { None };
        observe(node, n_obs, probe, ws, self.config.memory_budget_bytes, deviation)
    }

    fn risk_vector(&self, node: &PlanNode, signals: RuntimeSignals) -> Result<RiskVector> {
        let n = signals.observed_input_cardinality.max(1) as f64;
        let (r_opt, r_acc) = match self.mode {
            ExecutionMode::Orchestrated => {
                let mut est = node.est_input;
                if let Some(p) = node.est_probe {
                    est.variance_proxy = est.variance_proxy.max(p.variance_proxy);
                }
                let mut r_opt: f64 = 0.0;
                for (table, captured) in &node.sources {
                    let current = self.current_generation(table)?;
                    r_opt = r_opt.max(optimizer_risk(*captured, &est, current, &self.policy.weights)?);
                }
                let r_acc = match self.policy.thresholds.offload.get(&node.op()) {
                    Some(DeviceGate::BreakEven { n_star }) => Some(accelerator_risk(n, Some(*n_star))),
                    Some(DeviceGate::NoBreakEven) => Some(R_ACC_NO_BREAK_EVEN),
                    _ => None,
                };
                (Some(r_opt), r_acc)
            }
            _ if node.op().is_offloadable() => (None, Some(accelerator_risk(n, node.static_break_even))),
            _ => (None, None),
        };
        Ok(RiskVector {
            r_opt,
            r_exec: signals,
            r_acc,
        })
    }

    fn hook(&mut self, node: &PlanNode, signals: RuntimeSignals, current: Variant, rearmed: bool) -> Result<Decision> {
        self.trace.decision_count += 1;
        let accel = self.risk_vector(node, signals)?;
        let ctx = NodeContext {
            op: node.op(),
            current,
            variants: &node.variants,
            rearmed,
            static_break_even: node.static_break_even,
        };
        decision_hook(node, &ctx, &accel, self.mode, self.policy)
    }

    /// Charges one unit of work, applying spill inflation past the budget.
    fn charge<T>(
        &mut self,
        node: &PlanNode,
        variant: Variant,
        card: Cardinalities,
        ws: u64,
        stream: u64,
        work: impl FnOnce() -> T,
    ) -> Result<(T, f64, bool)> {
        let model_cost = cost(node.op(), variant, card, &self.config.device)?;
        let budget = self.config.memory_budget_bytes;
        let spilled = ws > budget;
        if spilled && !self.config.spill_enabled {
            return Err(Error::MemoryExhausted {
                node: node.id,
                bytes: ws,
                budget,
            });
        }
        let stream = ((node.id as u64) << 8) | stream;
        let (out, mut charged) = self.clock.charge(self.seed, stream, model_cost, work);
        if spilled {
            charged *= self.config.spill_multiplier;
        }
        Ok((out, charged, spilled))
    }

    fn run_scan(&mut self, node: &PlanNode, side: Side) -> Result<(Materialized, NodeRecord)> {
        let rows = self.table(side).row_count();
        let ws = rows as u64 * ROW_BYTES;
        let (out, charged, spilled) =
            self.charge(node, Variant::SeqScan, Cardinalities::Unary(rows as f64), ws, 0, || ops::scan(rows))?;
        Ok((
            Materialized::Rows(out),
            NodeRecord {
                node_id: node.id,
                op: node.op(),
                planned_variant: node.chosen,
                executed_variant: Variant::SeqScan,
                n_est: node.est_input.value,
                n_obs: rows as u64,
                decision: "none".into(),
                charged_cost: charged,
                spilled,
            },
        ))
    }

    /// Hook protocol shared by all late-bind nodes. Returns the variant for
    /// the first part, and the switch point plus second variant if any.
    fn negotiate(
        &mut self,
        node: &PlanNode,
        n_obs: u64,
        probe_obs: Option<u64>,
    ) -> Result<(Variant, Option<Variant>, String)> {
        let planned = node.chosen;
        let signals = self.observe(node, n_obs, probe_obs, false, planned);
        match self.hook(node, signals, planned, false)? {
            Decision::Keep => Ok((planned, None, "keep".into())),
            Decision::SwitchVariant(v) => {
                self.trace.switch_count += 1;
                Ok((v, None, format!("switch:{v}")))
            }
            Decision::Reevaluate => {
                let signals = self.observe(node, n_obs, probe_obs, true, planned);
                match self.hook(node, signals, planned, true)? {
                    Decision::SwitchVariant(v) => {
                        self.trace.switch_count += 1;
                        Ok((planned, Some(v), format!("reevaluate>switch:{v}")))
                    }
                    d => Ok((planned, None, format!("reevaluate>{d}"))),
                }
            }
        }
    }

    fn run_filter(&mut self, node: &PlanNode, side: Side, input: &[RowId]) -> Result<(Materialized, NodeRecord)> {
        let NodeKind::Filter { predicate, .. } = &node.kind else {
            unreachable!()
        };
        let values = self.table(side).column(&predicate.column)?;
        let (op, constant) = (predicate.op, predicate.constant);
        let n = input.len() as u64;
        let batch = self.config.batch_size;
        let (first, second, decision) = self.negotiate(node, n, None)?;

        let kernel = move |variant: Variant, rows: &[RowId]| match variant {
            Variant::Accelerator => ops::filter_accelerator(values, rows, op, constant, batch),
            _ => ops::filter_cpu(values, rows, op, constant),
        };
        let parts: Vec<(Variant, Part)> = match second {
            None => vec![(first, Part::All)],
            Some(v) => vec![(first, Part::Head(batch)), (v, Part::Tail(batch))],
        };
        let mut out = Vec::new();
        let (mut total, mut any_spill) = (0.0, false);
        for (i, (variant, part)) in parts.iter().enumerate() {
            let rows = part.slice(input);
            let ws = self.working_set(node, *variant, rows.len() as u64, 0);
            let (res, charged, spilled) = self.charge(
                node,
                *variant,
                Cardinalities::Unary(rows.len() as f64),
                ws,
                i as u64,
                || kernel(*variant, rows),
            )?;
            out.extend(res);
            total += charged;
            any_spill |= spilled;
        }
        let executed = parts.last().expect("at least one part").0;
        Ok((
            Materialized::Rows(out),
            self.record(node, executed, n, decision, total, any_spill),
        ))
    }

    fn run_join(&mut self, node: &PlanNode, left: &[RowId], right: &[RowId]) -> Result<(Materialized, NodeRecord)> {
        let NodeKind::Join {
            left_key,
            right_key,
            build,
        } = &node.kind
        else {
            unreachable!()
        };
        let lk = self.left.column(left_key)?;
        let rk = self.right.column(right_key)?;
        let (build_keys, build_rows, probe_keys, probe_rows) = match build {
            Side::Left => (lk, left, rk, right),
            Side::Right => (rk, right, lk, left),
        };
        let n_build = build_rows.len() as u64;
        let n_probe = probe_rows.len() as u64;
        let batch = self.config.batch_size;
        let (first, second, decision) = self.negotiate(node, n_build, Some(n_probe))?;

        let parts: Vec<(Variant, Part)> = match second {
            None => vec![(first, Part::All)],
            Some(v) => vec![(first, Part::Head(batch)), (v, Part::Tail(batch))],
        };
        let mut pairs = Vec::new();
        let (mut total, mut any_spill) = (0.0, false);
        for (i, (variant, part)) in parts.iter().enumerate() {
            let probe = part.slice(probe_rows);
            let ws = self.working_set(node, *variant, n_build, probe.len() as u64);
            let card = Cardinalities::Binary {
                build: n_build as f64,
                probe: probe.len() as f64,
            };
            let (res, charged, spilled) = self.charge(node, *variant, card, ws, i as u64, || match variant {
                Variant::HashJoin => ops::hash_join(build_keys, build_rows, probe_keys, probe),
                _ => ops::nested_loop_join(build_keys, build_rows, probe_keys, probe),
            })?;
            pairs.extend(res);
            total += charged;
            any_spill |= spilled;
        }
        if *build == Side::Right {
            for p in &mut pairs {
                *p = (p.1, p.0);
            }
        }
        let executed = parts.last().expect("at least one part").0;
        Ok((
            Materialized::Pairs(pairs),
            self.record(node, executed, n_build, decision, total, any_spill),
        ))
    }

    fn run_aggregate(&mut self, node: &PlanNode, pairs: &[(RowId, RowId)]) -> Result<(Materialized, NodeRecord)> {
        let NodeKind::Aggregate { aggregate } = &node.kind else {
            unreachable!()
        };
        let column = match aggregate {
            Aggregate::Count => None,
            Aggregate::Sum { side, column } => Some((*side, self.table(*side).column(column)?)),
        };
        let n = pairs.len() as u64;
        let batch = self.config.batch_size;
        let (first, second, decision) = self.negotiate(node, n, None)?;

        let kernel = move |variant: Variant, pairs: &[(RowId, RowId)]| -> i64 {
            let Some((side, values)) = column else {
                return pairs.len() as i64;
            };
            let pick = move |&(l, r): &(RowId, RowId)| match side {
                Side::Left => values[l as usize],
                Side::Right => values[r as usize],
            };
            match variant {
                Variant::Accelerator => ops::sum_accelerator(pairs.iter().map(pick), batch),
                _ => ops::sum_cpu(pairs.iter().map(pick)),
            }
        };
        let parts: Vec<(Variant, Part)> = match second {
            None => vec![(first, Part::All)],
            Some(v) => vec![(first, Part::Head(batch)), (v, Part::Tail(batch))],
        };
        let mut value = 0i64;
        let (mut total, mut any_spill) = (0.0, false);
        for (i, (variant, part)) in parts.iter().enumerate() {
            let chunk = part.slice(pairs);
            let ws = self.working_set(node, *variant, chunk.len() as u64, 0);
            let (res, charged, spilled) = self.charge(
                node,
                *variant,
                Cardinalities::Unary(chunk.len() as f64),
                ws,
                i as u64,
                || kernel(*variant, chunk),
            )?;
            value = value.wrapping_add(res);
            total += charged;
            any_spill |= spilled;
        }
        let executed = parts.last().expect("at least one part").0;
        Ok((
            Materialized::Value(value),
            self.record(node, executed, n, decision, total, any_spill),
        ))
    }

    fn record(&self, node: &PlanNode, executed: Variant, n_obs: u64, decision: String, charged: f64, spilled: bool) -> NodeRecord {
        NodeRecord {
            node_id: node.id,
            op: node.op(),
            planned_variant: node.chosen,
            executed_variant: executed,
            n_est: node.est_input.value,
            n_obs,
            decision,
            charged_cost: charged,
            spilled,
        }
    }
}

/// Signals at a late-bind boundary. `probe_obs`, when given, folds the
/// probe side into the estimate ratio (the re-armed look at a join).
pub fn observe(
    node: &PlanNode,
    n_obs: u64,
    probe_obs: Option<u64>,
    working_set: u64,
    budget: u64,
    elapsed_deviation: f64,
) -> RuntimeSignals {
    let mut ratio = n_obs as f64 / node.est_input.value.max(1.0);
    if let (Some(p), Some(est)) = (probe_obs, node.est_probe) {
        ratio = ratio.max(p as f64 / est.value.max(1.0));
    }
    let budget = budget.max(1);
    RuntimeSignals {
        observed_input_cardinality: n_obs,
        estimate_ratio: ratio,
        memory_pressure: (working_set as f64 / budget as f64).min(1.0),
        over_budget: working_set > budget,
        elapsed_deviation,
    }
}

/// `R_acc = N* / max(1, N_obs)`; the sentinel when no break-even exists.
pub fn accelerator_risk(n_obs: f64, n_star: Option<f64>) -> f64 {
    match n_star {
        Some(n) => n / n_obs.max(1.0),
        None => R_ACC_NO_BREAK_EVEN,
    }
}

/// Executor-side wrapper around [`decide`]: Baseline never asks, and a switch
/// must name a variant the planner enumerated for this node.
pub fn decision_hook(
    node: &PlanNode,
    ctx: &NodeContext<'_>,
    urs: &RiskVector,
    mode: ExecutionMode,
    policy: &Policy,
) -> Result<Decision> {
    if !node.late_bind {
        return Err(Error::ContractViolation(format!(
            "decision hook fired on non-late-bind node {}",
            node.id
        )));
    }
    if mode == ExecutionMode::Baseline {
        return Ok(Decision::Keep);
    }
    let d = decide(urs, ctx, &policy.thresholds, mode)?;
    check_decision(node, d)
}

pub fn check_decision(node: &PlanNode, d: Decision) -> Result<Decision> {
    if let Decision::SwitchVariant(v) = d {
        if !node.variants.contains(&v) {
            return Err(Error::ContractViolation(format!(
                "switch to {v} outside the variant set of node {}",
                node.id
            )));
        }
    }
    Ok(d)
}

/// Runs `plan` against `tables`, charging every node through `clock`.
pub fn execute(
    plan: &AnnotatedPlan,
    tables: &BTreeMap<String, Table>,
    mode: ExecutionMode,
    policy: &Policy,
    config: &EngineConfig,
    clock: ClockMode,
    seed: u64,
) -> Result<(QueryResult, ExecutionTrace)> {
    let lookup = |name: &str| tables.get(name).ok_or_else(|| Error::MissingTable(name.to_string()));
    let left = lookup(&plan.query.left)?;
    let right = lookup(&plan.query.right)?;
    let mut run = Run {
        plan,
        left,
        right,
        mode,
        policy,
        config,
        clock,
        seed: derive(seed, 0x0E_9EC),
        charged_so_far: 0.0,
        predicted_so_far: 0.0,
        trace: ExecutionTrace {
            mode,
            records: Vec::with_capacity(plan.nodes.len()),
            total_latency: 0.0,
            decision_count: 0,
            switch_count: 0,
        },
    };

    let mut outputs: Vec<Option<Materialized>> = Vec::with_capacity(plan.nodes.len());
    let mut join_rows = 0;
    for node in &run.plan.nodes {
        let (out, record) = match &node.kind {
            NodeKind::Scan { side, .. } => run.run_scan(node, *side)?,
            NodeKind::Filter { side, .. } => {
                let Some(Materialized::Rows(input)) = outputs[node.children[0]].take() else {
                    return Err(Error::ContractViolation("filter input is not a row set".into()));
                };
                run.run_filter(node, *side, &input)?
            }
            NodeKind::Join { .. } => {
                let l = outputs[node.children[0]].take();
                let r = outputs[node.children[1]].take();
                let (Some(Materialized::Rows(l)), Some(Materialized::Rows(r))) = (l, r) else {
                    return Err(Error::ContractViolation("join inputs are not row sets".into()));
                };
                let res = run.run_join(node, &l, &r)?;
                if let Materialized::Pairs(p) = &res.0 {
                    join_rows = p.len() as u64;
                }
                res
            }
            NodeKind::Aggregate { .. } => {
                let Some(Materialized::Pairs(pairs)) = outputs[node.children[0]].take() else {
                    return Err(Error::ContractViolation("aggregate input is not a join output".into()));
                };
                run.run_aggregate(node, &pairs)?
            }
        };
        run.charged_so_far += record.charged_cost;
        run.predicted_so_far += plan.predicted_cost(node.id);
        run.trace.records.push(record);
        outputs.push(Some(out));
    }

    let value = match outputs.pop().flatten() {
        Some(Materialized::Value(v)) => v,
        _ => return Err(Error::ContractViolation("plan root is not an aggregate".into())),
    };
    run.trace.total_latency = run.trace.records.iter().map(|r| r.charged_cost).sum();
    Ok((QueryResult { value, join_rows }, run.trace))
}

#[cfg(test)]
mod tests;
