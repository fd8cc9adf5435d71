use super::*;
use crate::datagen::{generate_table, ColumnSpec, TableSpec};
use crate::planner::{plan, Query};
use crate::policy::{Thresholds, R_ACC_NO_BREAK_EVEN};
use crate::stats::{capture_statistics, Comparison, Estimate, Predicate};

const EXACT: ClockMode = ClockMode::Simulated { sigma: 0.0 };

fn table(name: &str, rows: u64, keys: i64, seed: u64) -> Table {
    let spec = TableSpec {
        name: name.into(),
        row_count: rows,
        columns: vec![ColumnSpec::uniform("k", 0, keys - 1), ColumnSpec::uniform("v", 0, 99)],
    };
    generate_table(&spec, seed).unwrap()
}

fn setup(l_rows: u64, r_rows: u64, keys: i64, filter: bool) -> (AnnotatedPlan, BTreeMap<String, Table>) {
    let tables: BTreeMap<String, Table> = [table("l", l_rows, keys, 1), table("r", r_rows, keys, 2)]
        .into_iter()
        .map(|t| (t.name().to_string(), t))
        .collect();
    let stats = tables
        .values()
        .map(|t| (t.name().to_string(), capture_statistics(t)))
        .collect();
    let q = Query {
        left: "l".into(),
        right: "r".into(),
        left_filter: filter.then(|| Predicate::new("v", Comparison::Lt, 60)),
        right_filter: filter.then(|| Predicate::new("v", Comparison::Ge, 10)),
        left_key: "k".into(),
        right_key: "k".into(),
        aggregate: Aggregate::Sum {
            side: Side::Right,
            column: "v".into(),
        },
    };
    (plan(&q, &stats, &CostModel::default()).unwrap(), tables)
}

fn calibrated() -> Policy {
    let mut thresholds = Thresholds::default();
    for op in OpKind::OFFLOADABLE {
        thresholds.offload.insert(op, DeviceGate::BreakEven { n_star: 10_000.0 });
    }
    Policy {
        thresholds,
        ..Policy::default()
    }
}

fn run(plan: &AnnotatedPlan, tables: &BTreeMap<String, Table>, mode: ExecutionMode) -> (QueryResult, ExecutionTrace) {
    execute(plan, tables, mode, &calibrated(), &EngineConfig::default(), ClockMode::default(), 5).unwrap()
}

/// All-pairs join and sum, independent of the engine's kernels.
fn oracle(tables: &BTreeMap<String, Table>, filter: bool) -> (i64, u64) {
    let (l, r) = (&tables["l"], &tables["r"]);
    let (lk, lv) = (l.column("k").unwrap(), l.column("v").unwrap());
    let (rk, rv) = (r.column("k").unwrap(), r.column("v").unwrap());
    let (mut sum, mut rows) = (0i64, 0u64);
    for i in 0..l.row_count() {
        for j in 0..r.row_count() {
            let keep = !filter || (lv[i] < 60 && rv[j] >= 10);
            if keep && lk[i] == rk[j] {
                sum = sum.wrapping_add(rv[j]);
                rows += 1;
            }
        }
    }
    (sum, rows)
}

#[test]
fn observe_examples() {
    let (p, _) = setup(50, 50, 10, false);
    let mut node = p.nodes[2].clone();
    node.est_input = Estimate::exact(1000.0);
    node.est_probe = None;
    assert_eq!(observe(&node, 1000, None, 0, 100, 1.0).estimate_ratio, 1.0);
    assert_eq!(observe(&node, 12_000, None, 0, 100, 1.0).estimate_ratio, 12.0);
    let s = observe(&node, 1, None, 80_000_000, 100_000_000, 1.0);
    assert_eq!(s.memory_pressure, 0.8);
    assert!(!s.over_budget);
    let s = observe(&node, 1, None, 300, 100, 2.5);
    assert_eq!((s.memory_pressure, s.over_budget, s.elapsed_deviation), (1.0, true, 2.5));
    node.est_input = Estimate::exact(0.0);
    assert_eq!(observe(&node, 7, None, 0, 100, 1.0).estimate_ratio, 7.0);
}

#[test]
fn observe_folds_probe_ratio_when_given() {
    let (p, _) = setup(50, 50, 10, false);
    let mut node = p.nodes[2].clone();
    node.est_input = Estimate::exact(10.0);
    node.est_probe = Some(Estimate::exact(10.0));
    assert_eq!(observe(&node, 20, None, 0, 1, 1.0).estimate_ratio, 2.0);
    assert_eq!(observe(&node, 20, Some(300), 0, 1, 1.0).estimate_ratio, 30.0);
}

#[test]
fn fifty_by_fifty_matches_oracle_in_every_assignment() {
    let (p, tables) = setup(50, 50, 10, false);
    let (sum, rows) = oracle(&tables, false);
    let assignments = p.all_assignments();
    assert_eq!(assignments.len(), 4);
    for a in assignments {
        for mode in ExecutionMode::ALL {
            let (r, _) = run(&a, &tables, mode);
            assert_eq!((r.value, r.join_rows), (sum, rows));
        }
    }
}

#[test]
fn filtered_join_matches_oracle() {
    let (p, tables) = setup(900, 700, 40, true);
    let (sum, rows) = oracle(&tables, true);
    for a in p.all_assignments() {
        let (r, _) = run(&a, &tables, ExecutionMode::Baseline);
        assert_eq!((r.value, r.join_rows), (sum, rows));
    }
}

#[test]
fn baseline_never_changes_variants() {
    let (p, tables) = setup(3000, 3000, 5, false);
    let (_, trace) = run(&p, &tables, ExecutionMode::Baseline);
    assert_eq!(trace.switch_count, 0);
    for r in &trace.records {
        assert_eq!(r.planned_variant, r.executed_variant);
    }
}

#[test]
fn decisions_only_at_late_bind_nodes() {
    let (p, tables) = setup(200, 300, 10, true);
    for mode in ExecutionMode::ALL {
        let (_, trace) = run(&p, &tables, mode);
        assert_eq!(trace.records.len(), p.nodes.len());
        for (node, rec) in p.nodes.iter().zip(&trace.records) {
            assert_eq!(node.id, rec.node_id);
            assert_eq!(node.late_bind, rec.decision != "none");
        }
    }
}

#[test]
fn total_is_sum_of_charges_and_deterministic() {
    let (p, tables) = setup(400, 300, 20, true);
    let (_, a) = run(&p, &tables, ExecutionMode::Orchestrated);
    let (_, b) = run(&p, &tables, ExecutionMode::Orchestrated);
    assert_eq!(a.total_latency.to_bits(), b.total_latency.to_bits());
    let sum: f64 = a.records.iter().map(|r| r.charged_cost).sum();
    assert_eq!(a.total_latency, sum);
}

#[test]
fn noise_free_charges_equal_model_cost() {
    let (p, tables) = setup(400, 300, 20, false);
    let (_, trace) = execute(&p, &tables, ExecutionMode::Baseline, &calibrated(), &EngineConfig::default(), EXACT, 0)
        .unwrap();
    let scan = &trace.records[0];
    assert_eq!(scan.charged_cost, 0.1 * 400.0);
}

#[test]
fn underestimated_build_switches_to_hash_join() {
    // Planned on 20x20 rows, executed on a build side 25 times larger.
    let (p, _) = setup(20, 20, 10, false);
    let (_, big) = setup(500, 500, 10, false);
    assert_eq!(p.nodes[2].chosen, Variant::NestedLoop);
    for mode in [ExecutionMode::IndependentGates, ExecutionMode::Orchestrated] {
        let (_, trace) = run(&p, &big, mode);
        let join = &trace.records[2];
        assert_eq!(join.executed_variant, Variant::HashJoin, "{mode}");
        assert_eq!(join.decision, "switch:hash_join");
    }
    let (_, trace) = run(&p, &big, ExecutionMode::Baseline);
    assert_eq!(trace.records[2].executed_variant, Variant::NestedLoop);
}

#[test]
fn spill_inflates_or_fails() {
    let (p, tables) = setup(2000, 2000, 50, false);
    let tight = EngineConfig {
        memory_budget_bytes: 1000,
        ..EngineConfig::default()
    };
    let (_, roomy) = execute(&p, &tables, ExecutionMode::Baseline, &calibrated(), &EngineConfig::default(), EXACT, 0)
        .unwrap();
    let (_, spilled) = execute(&p, &tables, ExecutionMode::Baseline, &calibrated(), &tight, EXACT, 0).unwrap();
    assert!(spilled.records.iter().all(|r| r.spilled));
    assert_eq!(spilled.records[0].charged_cost, 3.0 * roomy.records[0].charged_cost);
    let no_spill = EngineConfig {
        spill_enabled: false,
        ..tight
    };
    let err = execute(&p, &tables, ExecutionMode::Baseline, &calibrated(), &no_spill, EXACT, 0).unwrap_err();
    assert!(matches!(err, Error::MemoryExhausted { node: 0, .. }));
}

#[test]
fn hash_join_over_budget_falls_back_to_nested_loop() {
    let (p, tables) = setup(300, 300, 50, false);
    let forced = p.with_variant(2, Variant::HashJoin).unwrap();
    // Fits both inputs (4.8 KB) but not the hash table on top (9.6 KB more).
    let config = EngineConfig {
        memory_budget_bytes: 6000,
        ..EngineConfig::default()
    };
    let (_, trace) = execute(&forced, &tables, ExecutionMode::Orchestrated, &calibrated(), &config, EXACT, 0).unwrap();
    assert_eq!(trace.records[2].decision, "switch:nested_loop");
    assert!(!trace.records[2].spilled);
}

#[test]
fn reevaluation_splits_work() {
    // Build side 9x its estimate sits in the band below rho_join = 10; the
    // probe side is far off, so the second look switches.
    let (p, _) = setup(20, 20, 10, false);
    let mut p = p;
    for n in &mut p.nodes {
        for (_, g) in &mut n.sources {
            *g = 0;
        }
    }
    let tables: BTreeMap<String, Table> = [table("l", 180, 10, 1), table("r", 3000, 10, 2)]
        .into_iter()
        .map(|t| (t.name().to_string(), t))
        .collect();
    let mut stale = tables.clone();
    for t in stale.values_mut() {
        *t = crate::datagen::apply_drift(t, &crate::datagen::DriftSpec::scale(1.0), 0).unwrap();
    }
    let (r, trace) = run(&p, &stale, ExecutionMode::Orchestrated);
    let join = &trace.records[2];
    assert_eq!(join.decision, "reevaluate>switch:hash_join");
    assert_eq!(join.executed_variant, Variant::HashJoin);
    assert_eq!(trace.decision_count, 3);
    let (b, _) = run(&p, &stale, ExecutionMode::Baseline);
    assert_eq!(r, b);
    // Fresh statistics: no distrust, no re-evaluation.
    let (_, fresh) = run(&p, &tables, ExecutionMode::Orchestrated);
    assert_eq!(fresh.records[2].decision, "keep");
    let (_, ig) = run(&p, &stale, ExecutionMode::IndependentGates);
    assert_eq!(ig.records[2].decision, "keep");
}

#[test]
fn hook_contract() {
    let (p, _) = setup(50, 50, 10, false);
    let join = &p.nodes[2];
    assert!(matches!(
        check_decision(join, Decision::SwitchVariant(Variant::Accelerator)),
        Err(Error::ContractViolation(_))
    ));
    assert!(check_decision(join, Decision::SwitchVariant(Variant::HashJoin)).is_ok());
    let ctx = NodeContext {
        op: join.op(),
        current: join.chosen,
        variants: &join.variants,
        rearmed: false,
        static_break_even: None,
    };
    let urs = RiskVector {
        r_opt: Some(0.0),
        r_exec: RuntimeSignals {
            observed_input_cardinality: 120,
            estimate_ratio: 12.0,
            memory_pressure: 0.0,
            over_budget: false,
            elapsed_deviation: 1.0,
        },
        r_acc: None,
    };
    let policy = calibrated();
    assert_eq!(decision_hook(join, &ctx, &urs, ExecutionMode::Baseline, &policy).unwrap(), Decision::Keep);
    assert_eq!(
        decision_hook(join, &ctx, &urs, ExecutionMode::Orchestrated, &policy).unwrap(),
        Decision::SwitchVariant(Variant::HashJoin)
    );
    assert!(matches!(
        decision_hook(&p.nodes[0], &ctx, &urs, ExecutionMode::Orchestrated, &policy),
        Err(Error::ContractViolation(_))
    ));
}

#[test]
fn orchestrated_requires_calibration() {
    let (p, tables) = setup(50, 50, 10, false);
    let err = execute(
        &p,
        &tables,
        ExecutionMode::Orchestrated,
        &Policy::default(),
        &EngineConfig::default(),
        EXACT,
        0,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(execute(&p, &tables, ExecutionMode::Baseline, &Policy::default(), &EngineConfig::default(), EXACT, 0).is_ok());
}

#[test]
fn missing_table_is_reported() {
    let (p, mut tables) = setup(50, 50, 10, false);
    tables.remove("r");
    let err = execute(&p, &tables, ExecutionMode::Baseline, &calibrated(), &EngineConfig::default(), EXACT, 0);
    assert!(matches!(err, Err(Error::MissingTable(t)) if t == "r"));
}

#[test]
fn accelerator_below_break_even_returns_to_cpu() {
    let (p, tables) = setup(3000, 3000, 50, true);
    let forced = p.with_variant(1, Variant::Accelerator).unwrap();
    let (_, trace) = run(&forced, &tables, ExecutionMode::Orchestrated);
    assert_eq!(trace.records[1].decision, "switch:cpu");
    let mut never = calibrated();
    never.thresholds.offload.insert(OpKind::Filter, DeviceGate::NoBreakEven);
    let (_, trace) = execute(&forced, &tables, ExecutionMode::Orchestrated, &never, &EngineConfig::default(), EXACT, 0)
        .unwrap();
    assert_eq!(trace.records[1].executed_variant, Variant::Cpu);
    assert_eq!(accelerator_risk(3.0, None), R_ACC_NO_BREAK_EVEN);
}

#[test]
fn trace_csv_has_one_row_per_node() {
    let (p, tables) = setup(100, 100, 10, true);
    let (_, trace) = run(&p, &tables, ExecutionMode::Orchestrated);
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with(&ExecutionTrace::CSV_HEADER.join(",")));
    assert_eq!(text.lines().count(), 1 + p.nodes.len());
}

#[test]
fn mode_names_round_trip() {
    for m in ExecutionMode::ALL {
        assert_eq!(ExecutionMode::parse(m.name()), Some(m));
    }
    assert_eq!(ExecutionMode::parse("other"), None);
}
