//! Plans a two-table filter-join-aggregate query.
//!
//! The tree shape is fixed: scan -> [filter] on each side, one equi-join, one
//! aggregate on top. The planner picks the cheapest variant for every node at
//! its estimated cardinalities (ties broken by variant name) but leaves the
//! join family and the device of offloadable primitives open for the engine:
//! those nodes are marked `late_bind` and carry the full variant set.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{estimate_selectivity, Estimate, Predicate, TableStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Scan,
    Filter,
    Join,
    Aggregate,
}

impl OpKind {
    pub const OFFLOADABLE: [OpKind; 2] = [OpKind::Filter, OpKind::Aggregate];

    pub fn is_offloadable(self) -> bool {
        matches!(self, OpKind::Filter | OpKind::Aggregate)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Scan => "scan",
            OpKind::Filter => "filter",
            OpKind::Join => "join",
            OpKind::Aggregate => "aggregate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [OpKind::Scan, OpKind::Filter, OpKind::Join, OpKind::Aggregate]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SeqScan,
    Cpu,
    Accelerator,
    NestedLoop,
    HashJoin,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::SeqScan => "seq_scan",
            Variant::Cpu => "cpu",
            Variant::Accelerator => "accelerator",
            Variant::NestedLoop => "nested_loop",
            Variant::HashJoin => "hash_join",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Variant::SeqScan,
            Variant::Cpu,
            Variant::Accelerator,
            Variant::NestedLoop,
            Variant::HashJoin,
        ]
        .into_iter()
        .find(|v| v.name() == s)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pre-enumerated strategies for an operator kind, sorted by name.
pub fn variant_set(op: OpKind) -> Vec<Variant> {
    let mut set = match op {
        OpKind::Scan => vec![Variant::SeqScan],
        OpKind::Filter | OpKind::Aggregate => vec![Variant::Cpu, Variant::Accelerator],
        OpKind::Join => vec![Variant::NestedLoop, Variant::HashJoin],
    };
    set.sort_by_key(|v| v.name());
    set
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Aggregate {
    Count,
    Sum { side: Side, column: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub left: String,
    pub right: String,
    pub left_filter: Option<Predicate>,
    pub right_filter: Option<Predicate>,
    pub left_key: String,
    pub right_key: String,
    pub aggregate: Aggregate,
}

impl Query {
    pub fn table(&self, side: Side) -> &str {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn filter(&self, side: Side) -> Option<&Predicate> {
        match side {
            Side::Left => self.left_filter.as_ref(),
            Side::Right => self.right_filter.as_ref(),
        }
    }

    pub fn key(&self, side: Side) -> &str {
        match side {
            Side::Left => &self.left_key,
            Side::Right => &self.right_key,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearCost {
    pub per_item: f64,
    pub fixed: f64,
}

/// Accelerator cost: `setup + (transfer + compute) * N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelCost {
    pub setup: f64,
    pub transfer: f64,
    pub compute: f64,
}

impl AccelCost {
    pub fn per_item(&self) -> f64 {
        self.transfer + self.compute
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveCost {
    pub cpu: LinearCost,
    pub accelerator: AccelCost,
}

impl PrimitiveCost {
    /// Crossover input size of the two linear cost lines, if the accelerator
    /// has the smaller slope.
    pub fn break_even(&self) -> Option<f64> {
        let slope_gap = self.cpu.per_item - self.accelerator.per_item();
        if slope_gap <= 0.0 {
            return None;
        }
        Some((self.accelerator.setup - self.cpu.fixed) / slope_gap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NestedLoopCost {
    pub per_pair: f64,
    pub fixed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HashJoinCost {
    pub per_build: f64,
    pub per_probe: f64,
    pub fixed: f64,
}

/// Cost coefficients in abstract microsecond-equivalent units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub scan: LinearCost,
    pub filter: PrimitiveCost,
    pub aggregate: PrimitiveCost,
    pub nested_loop: NestedLoopCost,
    pub hash_join: HashJoinCost,
}

impl Default for CostModel {
    /// cpu 1.0/item against an accelerator with setup 8000 and 0.2/item puts
    /// the break-even of both offloadable primitives at N = 10,000 rows.
    /// Nested loop and hash join cross over near 60x60 input rows.
    fn default() -> Self {
        let primitive = PrimitiveCost {
            cpu: LinearCost {
                per_item: 1.0,
                fixed: 0.0,
            },
            accelerator: AccelCost {
                setup: 8000.0,
                transfer: 0.15,
                compute: 0.05,
            },
        };
        CostModel {
            scan: LinearCost {
                per_item: 0.1,
                fixed: 0.0,
            },
            filter: primitive,
            aggregate: primitive,
            nested_loop: NestedLoopCost {
                per_pair: 0.05,
                fixed: 0.0,
            },
            hash_join: HashJoinCost {
                per_build: 2.0,
                per_probe: 1.0,
                fixed: 50.0,
            },
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let mut coeffs = vec![
            ("scan.per_item", self.scan.per_item),
            ("scan.fixed", self.scan.fixed),
            ("nested_loop.per_pair", self.nested_loop.per_pair),
            ("nested_loop.fixed", self.nested_loop.fixed),
            ("hash_join.per_build", self.hash_join.per_build),
            ("hash_join.per_probe", self.hash_join.per_probe),
            ("hash_join.fixed", self.hash_join.fixed),
        ];
        for (name, p) in [("filter", &self.filter), ("aggregate", &self.aggregate)] {
            coeffs.extend([
                (name, p.cpu.per_item),
                (name, p.cpu.fixed),
                (name, p.accelerator.setup),
                (name, p.accelerator.transfer),
                (name, p.accelerator.compute),
            ]);
        }
        match coeffs.iter().find(|(_, c)| !(*c >= 0.0 && c.is_finite())) {
            Some((name, c)) => Err(Error::Validation(format!(
                "cost coefficient {name} must be finite and >= 0, got {c}"
            ))),
            None => Ok(()),
        }
    }

    pub fn primitive(&self, op: OpKind) -> Option<&PrimitiveCost> {
        match op {
            OpKind::Filter => Some(&self.filter),
            OpKind::Aggregate => Some(&self.aggregate),
            _ => None,
        }
    }

    pub fn primitive_mut(&mut self, op: OpKind) -> Option<&mut PrimitiveCost> {
        match op {
            OpKind::Filter => Some(&mut self.filter),
            OpKind::Aggregate => Some(&mut self.aggregate),
            _ => None,
        }
    }
}

/// Input sizes for [`cost`]. Joins take (build, probe); everything else one N.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cardinalities {
    Unary(f64),
    Binary { build: f64, probe: f64 },
}

pub fn cost(op: OpKind, variant: Variant, card: Cardinalities, model: &CostModel) -> Result<f64> {
    let check = |n: f64| {
        if n < 0.0 || n.is_nan() {
            Err(Error::NegativeCardinality(n))
        } else {
            Ok(n)
        }
    };
    let mismatch = || {
        Error::ContractViolation(format!(
            "variant {variant} with {card:?} is not valid for a {op} node"
        ))
    };
    match (op, variant, card) {
        (OpKind::Scan, Variant::SeqScan, Cardinalities::Unary(n)) => {
            Ok(model.scan.per_item * check(n)? + model.scan.fixed)
        }
        (OpKind::Filter | OpKind::Aggregate, Variant::Cpu, Cardinalities::Unary(n)) => {
            let p = model.primitive(op).expect("offloadable");
            Ok(p.cpu.per_item * check(n)? + p.cpu.fixed)
        }
        (OpKind::Filter | OpKind::Aggregate, Variant::Accelerator, Cardinalities::Unary(n)) => {
            let a = model.primitive(op).expect("offloadable").accelerator;
            let n = check(n)?;
            Ok(a.setup + a.transfer * n + a.compute * n)
        }
        (OpKind::Join, Variant::NestedLoop, Cardinalities::Binary { build, probe }) => {
            let nl = model.nested_loop;
            Ok(nl.per_pair * check(build)? * check(probe)? + nl.fixed)
        }
        (OpKind::Join, Variant::HashJoin, Cardinalities::Binary { build, probe }) => {
            let h = model.hash_join;
            Ok(h.per_build * check(build)? + h.per_probe * check(probe)? + h.fixed)
        }
        _ => Err(mismatch()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NodeKind {
    Scan { side: Side, table: String },
    Filter { side: Side, predicate: Predicate },
    Join { left_key: String, right_key: String, build: Side },
    Aggregate { aggregate: Aggregate },
}

impl NodeKind {
    pub fn op(&self) -> OpKind {
        match self {
            NodeKind::Scan { .. } => OpKind::Scan,
            NodeKind::Filter { .. } => OpKind::Filter,
            NodeKind::Join { .. } => OpKind::Join,
            NodeKind::Aggregate { .. } => OpKind::Aggregate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub id: usize,
    pub kind: NodeKind,
    pub chosen: Variant,
    pub late_bind: bool,
    /// Empty unless `late_bind`.
    pub variants: Vec<Variant>,
    /// Primary input cardinality; the build input for joins.
    pub est_input: Estimate,
    /// Probe input cardinality, joins only.
    pub est_probe: Option<Estimate>,
    pub est_output: Estimate,
    pub children: Vec<usize>,
    /// (table, captured generation) for every table feeding this node.
    pub sources: Vec<(String, u64)>,
    /// Crossover of the planner's own cost lines, offloadable nodes only.
    pub static_break_even: Option<f64>,
}

impl PlanNode {
    pub fn op(&self) -> OpKind {
        self.kind.op()
    }

    pub fn estimated_cardinalities(&self) -> Cardinalities {
        match self.est_probe {
            Some(probe) => Cardinalities::Binary {
                build: self.est_input.value,
                probe: probe.value,
            },
            None => Cardinalities::Unary(self.est_input.value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedPlan {
    pub query: Query,
    /// Post-order: children precede parents, the root is last.
    pub nodes: Vec<PlanNode>,
    pub cost_model: CostModel,
}

impl AnnotatedPlan {
    pub fn root(&self) -> &PlanNode {
        self.nodes.last().expect("plans are never empty")
    }

    /// Modeled cost of a node's chosen variant at its estimated cardinalities.
    pub fn predicted_cost(&self, node: usize) -> f64 {
        let n = &self.nodes[node];
        cost(n.op(), n.chosen, n.estimated_cardinalities(), &self.cost_model)
            .expect("planner only emits valid nodes")
    }

    /// Copy of the plan with one late-bind node pinned to another variant.
    pub fn with_variant(&self, node: usize, variant: Variant) -> Result<AnnotatedPlan> {
        let n = self
            .nodes
            .get(node)
            .ok_or_else(|| Error::ContractViolation(format!("no node {node}")))?;
        if !n.variants.contains(&variant) {
            return Err(Error::ContractViolation(format!(
                "variant {variant} not in the variant set of node {node}"
            )));
        }
        let mut plan = self.clone();
        plan.nodes[node].chosen = variant;
        Ok(plan)
    }

    /// Every assignment of variants to late-bind nodes.
    pub fn all_assignments(&self) -> Vec<AnnotatedPlan> {
        let mut plans = vec![self.clone()];
        for node in self.nodes.iter().filter(|n| n.late_bind) {
            plans = plans
                .into_iter()
                .flat_map(|p| {
                    node.variants
                        .iter()
                        .map(move |&v| p.with_variant(node.id, v).expect("variant from set"))
                        .collect::<Vec<_>>()
                })
                .collect();
        }
        plans
    }

    /// Indented EXPLAIN-style rendering, root first.
    pub fn explain(&self) -> String {
        let mut out = String::new();
        self.explain_node(self.nodes.len() - 1, 0, &mut out);
        out
    }

    fn explain_node(&self, id: usize, depth: usize, out: &mut String) {
        let n = &self.nodes[id];
        let label = match &n.kind {
            NodeKind::Scan { side, table } => format!("Scan {table} ({side})"),
            NodeKind::Filter { side, predicate } => format!("Filter {side}.{predicate}"),
            NodeKind::Join {
                left_key,
                right_key,
                build,
            } => format!("Join left.{left_key} = right.{right_key} build={build}"),
            NodeKind::Aggregate { aggregate } => match aggregate {
                Aggregate::Count => "Aggregate count(*)".to_string(),
                Aggregate::Sum { side, column } => format!("Aggregate sum({side}.{column})"),
            },
        };
        let _ = write!(
            out,
            "{:indent$}[{}] {label}  variant={}",
            "",
            n.id,
            n.chosen,
            indent = depth * 2
        );
        let _ = write!(
            out,
            " est_in={:.1} (var {:.3})",
            n.est_input.value, n.est_input.variance_proxy
        );
        if let Some(p) = n.est_probe {
            let _ = write!(out, " est_probe={:.1}", p.value);
        }
        let _ = write!(out, " est_out={:.1} cost={:.1}", n.est_output.value, self.predicted_cost(id));
        if n.late_bind {
            let names: Vec<_> = n.variants.iter().map(|v| v.name()).collect();
            let _ = write!(out, " late_bind={{{}}}", names.join(","));
        }
        out.push('\n');
        for &c in n.children.iter().rev() {
            self.explain_node(c, depth + 1, out);
        }
    }
}

/// Cheapest variant at `card`; equal costs resolve to the smaller name.
fn argmin_variant(op: OpKind, card: Cardinalities, model: &CostModel) -> Result<Variant> {
    let mut best: Option<(f64, Variant)> = None;
    for v in variant_set(op) {
        let c = cost(op, v, card, model)?;
        match best {
            Some((bc, bv)) if bc < c || (bc == c && bv.name() <= v.name()) => {}
            _ => best = Some((c, v)),
        }
    }
    Ok(best.expect("variant sets are non-empty").1)
}

pub fn plan(
    query: &Query,
    stats: &BTreeMap<String, TableStats>,
    cost_model: &CostModel,
) -> Result<AnnotatedPlan> {
    cost_model.validate()?;
    let stats_for = |side: Side| {
        let name = query.table(side);
        stats
            .get(name)
            .ok_or_else(|| Error::MissingStats(name.to_string()))
    };
    let left_stats = stats_for(Side::Left)?;
    let right_stats = stats_for(Side::Right)?;
    let left_key = left_stats.column(&query.left_key)?;
    let right_key = right_stats.column(&query.right_key)?;
    if let Aggregate::Sum { side, column } = &query.aggregate {
        stats_for(*side)?.column(column)?;
    }

    let mut nodes: Vec<PlanNode> = Vec::new();
    let mut push = |mut node: PlanNode| {
        node.id = nodes.len();
        nodes.push(node);
        nodes.len() - 1
    };
    let make = |kind: NodeKind,
                est_input: Estimate,
                est_probe: Option<Estimate>,
                est_output: Estimate,
                children: Vec<usize>,
                sources: Vec<(String, u64)>|
     -> Result<PlanNode> {
        let op = kind.op();
        let card = match est_probe {
            Some(p) => Cardinalities::Binary {
                build: est_input.value,
                probe: p.value,
            },
            None => Cardinalities::Unary(est_input.value),
        };
        let late_bind = op != OpKind::Scan;
        Ok(PlanNode {
            id: 0,
            chosen: argmin_variant(op, card, cost_model)?,
            late_bind,
            variants: if late_bind { variant_set(op) } else { Vec::new() },
            static_break_even: cost_model.primitive(op).and_then(PrimitiveCost::break_even),
            kind,
            est_input,
            est_probe,
            est_output,
            children,
            sources,
        })
    };

    let mut side_outputs = Vec::with_capacity(2);
    for (side, st) in [(Side::Left, left_stats), (Side::Right, right_stats)] {
        let source = vec![(st.table.clone(), st.captured_generation)];
        let rows = Estimate::exact(st.row_count as f64);
        let scan = push(make(
            NodeKind::Scan {
                side,
                table: st.table.clone(),
            },
            rows,
            None,
            rows,
            vec![],
            source.clone(),
        )?);
        let output = match query.filter(side) {
            Some(pred) => {
                let sel = estimate_selectivity(st, pred)?;
                let out = Estimate {
                    value: rows.value * sel.value,
                    variance_proxy: sel.variance_proxy,
                };
                let id = push(make(
                    NodeKind::Filter {
                        side,
                        predicate: pred.clone(),
                    },
                    rows,
                    None,
                    out,
                    vec![scan],
                    source,
                )?);
                (id, out)
            }
            None => (scan, rows),
        };
        side_outputs.push(output);
    }
    let (left_id, left_est) = side_outputs[0];
    let (right_id, right_est) = side_outputs[1];

    let build = if right_est.value < left_est.value {
        Side::Right
    } else {
        Side::Left
    };
    let (build_est, probe_est) = match build {
        Side::Left => (left_est, right_est),
        Side::Right => (right_est, left_est),
    };
    let key_ndv = left_key.ndv.max(right_key.ndv).max(1) as f64;
    let join_out = Estimate {
        value: left_est.value * right_est.value / key_ndv,
        variance_proxy: left_est.variance_proxy + right_est.variance_proxy,
    };
    let both = vec![
        (left_stats.table.clone(), left_stats.captured_generation),
        (right_stats.table.clone(), right_stats.captured_generation),
    ];
    let join = push(make(
        NodeKind::Join {
            left_key: query.left_key.clone(),
            right_key: query.right_key.clone(),
            build,
        },
        build_est,
        Some(probe_est),
        join_out,
        vec![left_id, right_id],
        both.clone(),
    )?);
    push(make(
        NodeKind::Aggregate {
            aggregate: query.aggregate.clone(),
        },
        join_out,
        None,
        Estimate::exact(1.0),
        vec![join],
        both,
    )?);

    Ok(AnnotatedPlan {
        query: query.clone(),
        nodes,
        cost_model: *cost_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_table, ColumnSpec, TableSpec};
    use crate::stats::{capture_statistics, Comparison};

    fn model() -> CostModel {
        CostModel::default()
    }

    #[test]
    fn cost_examples() {
        let mut m = model();
        m.filter.cpu = LinearCost {
            per_item: 1.0,
            fixed: 0.0,
        };
        assert_eq!(cost(OpKind::Filter, Variant::Cpu, Cardinalities::Unary(5000.0), &m).unwrap(), 5000.0);
        let acc = cost(OpKind::Filter, Variant::Accelerator, Cardinalities::Unary(10_000.0), &m).unwrap();
        assert!((acc - 10_000.0).abs() < 1e-9);
        m.nested_loop = NestedLoopCost {
            per_pair: 0.01,
            fixed: 0.0,
        };
        let nl = cost(
            OpKind::Join,
            Variant::NestedLoop,
            Cardinalities::Binary {
                build: 100.0,
                probe: 100.0,
            },
            &m,
        )
        .unwrap();
        assert!((nl - 100.0).abs() < 1e-9);
    }

    #[test]
    fn cost_errors_and_zero() {
        let m = model();
        assert!(matches!(
            cost(OpKind::Filter, Variant::Cpu, Cardinalities::Unary(-1.0), &m),
            Err(Error::NegativeCardinality(_))
        ));
        assert!(matches!(
            cost(OpKind::Filter, Variant::HashJoin, Cardinalities::Unary(1.0), &m),
            Err(Error::ContractViolation(_))
        ));
        let mut zero = m;
        zero.filter.accelerator.setup = 0.0;
        zero.hash_join.fixed = 0.0;
        assert_eq!(cost(OpKind::Filter, Variant::Accelerator, Cardinalities::Unary(0.0), &zero).unwrap(), 0.0);
        assert_eq!(cost(OpKind::Filter, Variant::Cpu, Cardinalities::Unary(0.0), &zero).unwrap(), 0.0);
        let zero_join = Cardinalities::Binary { build: 0.0, probe: 0.0 };
        assert_eq!(cost(OpKind::Join, Variant::HashJoin, zero_join, &zero).unwrap(), 0.0);
        assert_eq!(cost(OpKind::Join, Variant::NestedLoop, zero_join, &zero).unwrap(), 0.0);
    }

    #[test]
    fn default_break_even() {
        assert!((model().filter.break_even().unwrap() - 10_000.0).abs() < 1e-6);
        let mut flat = model();
        flat.filter.accelerator.transfer = 1.0;
        flat.filter.accelerator.compute = 0.0;
        assert_eq!(flat.filter.break_even(), None);
    }

    #[test]
    fn argmin_examples() {
        let m = model();
        // 0.05*10*10 = 5 against 2*10 + 10 + 50 = 80
        let small = Cardinalities::Binary { build: 10.0, probe: 10.0 };
        assert_eq!(argmin_variant(OpKind::Join, small, &m).unwrap(), Variant::NestedLoop);
        let big = Cardinalities::Binary { build: 1000.0, probe: 1000.0 };
        assert_eq!(argmin_variant(OpKind::Join, big, &m).unwrap(), Variant::HashJoin);
        // 1.0*5000 against 8000 + 0.2*5000
        assert_eq!(argmin_variant(OpKind::Filter, Cardinalities::Unary(5000.0), &m).unwrap(), Variant::Cpu);
        assert_eq!(
            argmin_variant(OpKind::Filter, Cardinalities::Unary(20_000.0), &m).unwrap(),
            Variant::Accelerator
        );
        // exact tie at the break-even: "accelerator" < "cpu"
        let mut tie = m;
        tie.filter.accelerator = AccelCost {
            setup: 0.0,
            transfer: 1.0,
            compute: 0.0,
        };
        assert_eq!(argmin_variant(OpKind::Filter, Cardinalities::Unary(7.0), &tie).unwrap(), Variant::Accelerator);
    }

    fn catalog() -> BTreeMap<String, TableStats> {
        let mk = |name: &str, rows| {
            let spec = TableSpec {
                name: name.into(),
                row_count: rows,
                columns: vec![ColumnSpec::uniform("k", 0, 99), ColumnSpec::uniform("v", 0, 999)],
            };
            let t = generate_table(&spec, 1).unwrap();
            (name.to_string(), capture_statistics(&t))
        };
        [mk("l", 2000), mk("r", 500)].into_iter().collect()
    }

    fn query() -> Query {
        Query {
            left: "l".into(),
            right: "r".into(),
            left_filter: Some(Predicate::new("v", Comparison::Lt, 10)),
            right_filter: None,
            left_key: "k".into(),
            right_key: "k".into(),
            aggregate: Aggregate::Sum {
                side: Side::Left,
                column: "v".into(),
            },
        }
    }

    #[test]
    fn plan_shape_and_annotations() {
        let p = plan(&query(), &catalog(), &model()).unwrap();
        let ops: Vec<_> = p.nodes.iter().map(PlanNode::op).collect();
        assert_eq!(
            ops,
            [OpKind::Scan, OpKind::Filter, OpKind::Scan, OpKind::Join, OpKind::Aggregate]
        );
        for n in &p.nodes {
            assert_eq!(n.late_bind, n.op() != OpKind::Scan);
            if n.late_bind {
                assert!(n.variants.len() >= 2);
                assert!(n.variants.contains(&n.chosen));
                for &v in &n.variants {
                    let c = cost(n.op(), v, n.estimated_cardinalities(), &p.cost_model).unwrap();
                    assert!(c >= p.predicted_cost(n.id));
                }
            } else {
                assert!(n.variants.is_empty());
            }
        }
        // filter keeps ~1% of 2000 rows, so the left side builds
        let join = &p.nodes[3];
        assert!(matches!(join.kind, NodeKind::Join { build: Side::Left, .. }));
        assert!((join.est_input.value - 20.0).abs() < 5.0);
        assert_eq!(join.est_probe.unwrap().value, 500.0);
        assert_eq!(p, plan(&query(), &catalog(), &model()).unwrap());
        let text = p.explain();
        assert!(text.starts_with("[4] Aggregate sum(left.v)"));
        assert!(text.contains("late_bind={hash_join,nested_loop}"));
        assert!(text.contains("  [3] Join"));
    }

    #[test]
    fn plan_errors() {
        let mut stats = catalog();
        stats.remove("r");
        assert!(matches!(plan(&query(), &stats, &model()), Err(Error::MissingStats(_))));
        let mut q = query();
        q.left_key = "missing".into();
        assert!(matches!(plan(&q, &catalog(), &model()), Err(Error::UnknownColumn(_))));
    }

    #[test]
    fn forced_variants() {
        let p = plan(&query(), &catalog(), &model()).unwrap();
        assert!(p.with_variant(3, Variant::Cpu).is_err());
        assert!(p.with_variant(0, Variant::Cpu).is_err());
        assert_eq!(p.with_variant(3, Variant::HashJoin).unwrap().nodes[3].chosen, Variant::HashJoin);
        // filter, join, aggregate: 2 * 2 * 2
        assert_eq!(p.all_assignments().len(), 8);
    }
}
