//! Workload constructions for the three experiments plus a drift-free
//! control. Sizes and drift magnitudes are ours; see each constructor.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{apply_drift, generate_table, ColumnSpec, Distribution, DriftSpec, Table, TableSpec};
use crate::engine::ExecutionMode;
use crate::error::{Error, Result};
use crate::planner::{Aggregate, CostModel, OpKind, Query, Side};
use crate::rng::{derive, stream_rng};
use crate::stats::{capture_statistics, Comparison, Predicate, TableStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    InputScaleShift,
    StaleStats,
    /// The stale-statistics workload with every query at generation 0.
    Control,
    BreakEven,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::InputScaleShift,
        ScenarioKind::StaleStats,
        ScenarioKind::Control,
        ScenarioKind::BreakEven,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::InputScaleShift => "input_scale_shift",
            ScenarioKind::StaleStats => "stale_stats",
            ScenarioKind::Control => "control",
            ScenarioKind::BreakEven => "break_even",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown scenario `{s}`")))
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub queries: usize,
    pub seed: u64,
    pub modes: Vec<ExecutionMode>,
    /// input_scale_shift: fraction of queries that run on a scaled table.
    pub drift_fraction: f64,
    /// input_scale_shift: scale factors, drawn uniformly per drifted query.
    pub scale_factors: Vec<f64>,
    /// break_even: the planner's accelerator setup cost is divided by this,
    /// so its static N* is off by the same factor.
    pub miscalibration: f64,
    /// Overrides the row count of the left (fact) table where the scenario
    /// has a fixed one.
    pub left_rows: Option<u64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            queries: 200,
            seed: 1,
            modes: ExecutionMode::ALL.to_vec(),
            drift_fraction: 0.2,
            scale_factors: vec![5.0, 10.0, 20.0],
            miscalibration: 2.0,
            left_rows: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries < 1 {
            return Err(Error::Validation("query count must be >= 1".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Validation("at least one execution mode is required".into()));
        }
        if !(0.0..=1.0).contains(&self.drift_fraction) {
            return Err(Error::Validation(format!(
                "drift_fraction must be in [0, 1], got {}",
                self.drift_fraction
            )));
        }
        if self.scale_factors.is_empty() || self.scale_factors.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(Error::Validation("scale_factors must be non-empty and > 0".into()));
        }
        if !(self.miscalibration > 0.0 && self.miscalibration.is_finite()) {
            return Err(Error::Validation(format!(
                "miscalibration must be > 0, got {}",
                self.miscalibration
            )));
        }
        Ok(())
    }
}

pub type Tables = BTreeMap<String, Table>;
pub type Stats = BTreeMap<String, TableStats>;

/// Everything needed to plan and run one query.
#[derive(Debug, Clone)]
pub struct QueryInstance {
    pub id: usize,
    pub query: Query,
    pub tables: Arc<Tables>,
    /// What the planner sees; may be older than `tables`.
    pub stats: Arc<Stats>,
    /// Short tag for the drift state, e.g. `gen2` or `x10`.
    pub label: String,
}

#[derive(Debug)]
enum Workload {
    /// A few fixed table sets; the schedule picks one per query.
    Sets {
        query: Query,
        sets: Vec<(String, Arc<Tables>)>,
        stats: Arc<Stats>,
        schedule: Vec<usize>,
    },
    /// Fact-table size log-spaced over the query index.
    BreakEven { sizes: Vec<u64>, dim: Table },
}

#[derive(Debug)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub config: ScenarioConfig,
    /// Coefficients the planner costs with. The engine charges its own.
    pub planner_model: CostModel,
    workload: Workload,
}

impl Scenario {
    pub fn new(kind: ScenarioKind, config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        match kind {
            ScenarioKind::InputScaleShift => scenario_input_scale_shift(config),
            ScenarioKind::StaleStats => scenario_stale_stats(config),
            ScenarioKind::Control => scenario_control(config),
            ScenarioKind::BreakEven => scenario_break_even(config),
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn instance(&self, id: usize) -> Result<QueryInstance> {
        if id >= self.config.queries {
            return Err(Error::Validation(format!("query {id} out of range")));
        }
        match &self.workload {
            Workload::Sets {
                query,
                sets,
                stats,
                schedule,
            } => {
                let (label, tables) = &sets[schedule[id]];
                Ok(QueryInstance {
                    id,
                    query: query.clone(),
                    tables: Arc::clone(tables),
                    stats: Arc::clone(stats),
                    label: label.clone(),
                })
            }
            Workload::BreakEven { sizes, dim } => {
                let n = sizes[id];
                let spec = TableSpec {
                    name: "events".into(),
                    row_count: n,
                    columns: vec![ColumnSpec::uniform("k", 0, 15), ColumnSpec::uniform("v", 0, 999)],
                };
                let fact = generate_table(&spec, derive(self.config.seed, 0xB0 + id as u64))?;
                let stats = [capture_statistics(&fact), capture_statistics(dim)]
                    .into_iter()
                    .map(|s| (s.table.clone(), s))
                    .collect();
                let tables = [fact, dim.clone()]
                    .into_iter()
                    .map(|t| (t.name().to_string(), t))
                    .collect();
                Ok(QueryInstance {
                    id,
                    query: break_even_query(),
                    tables: Arc::new(tables),
                    stats: Arc::new(stats),
                    label: format!("n{n}"),
                })
            }
        }
    }
}

fn table_map(tables: Vec<Table>) -> Arc<Tables> {
    Arc::new(tables.into_iter().map(|t| (t.name().to_string(), t)).collect())
}

fn stats_map(tables: &Tables) -> Arc<Stats> {
    Arc::new(
        tables
            .values()
            .map(|t| (t.name().to_string(), capture_statistics(t)))
            .collect(),
    )
}

/// Selection-free scan, join, aggregate ("large_noselect"). Statistics come
/// from the unscaled tables; a configured fraction of queries run against
/// both tables scaled by a factor drawn from `scale_factors`. With a 20-row
/// dimension the planner picks nested loop, which is quadratic in the scale.
pub fn scenario_input_scale_shift(config: ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let seed = config.seed;
    let fact = generate_table(
        &TableSpec {
            name: "fact".into(),
            row_count: config.left_rows.unwrap_or(2000),
            columns: vec![ColumnSpec::uniform("k", 0, 399), ColumnSpec::uniform("v", 0, 999)],
        },
        derive(seed, 0x15_01),
    )?;
    let dim = generate_table(
        &TableSpec {
            name: "dim".into(),
            row_count: 20,
            columns: vec![ColumnSpec::uniform("k", 0, 399), ColumnSpec::uniform("w", 0, 999)],
        },
        derive(seed, 0x15_02),
    )?;
    let mut sets = vec![("base".to_string(), table_map(vec![fact.clone(), dim.clone()]))];
    let stats = stats_map(&sets[0].1);
    for (i, &f) in config.scale_factors.iter().enumerate() {
        let drift = DriftSpec::scale(f);
        let label = format!("x{f}");
        let scaled = vec![
            apply_drift(&fact, &drift, derive(seed, 0x15_10 + i as u64))?,
            apply_drift(&dim, &drift, derive(seed, 0x15_20 + i as u64))?,
        ];
        sets.push((label, table_map(scaled)));
    }
    let schedule = (0..config.queries)
        .map(|q| {
            let mut rng = stream_rng(derive(seed, 0x15_5C), q as u64);
            if rng.random::<f64>() < config.drift_fraction {
                1 + rng.random_range(0..config.scale_factors.len())
            } else {
                0
            }
        })
        .collect();
    Ok(Scenario {
        kind: ScenarioKind::InputScaleShift,
        config,
        planner_model: CostModel::default(),
        workload: Workload::Sets {
            query: Query {
                left: "fact".into(),
                right: "dim".into(),
                left_filter: None,
                right_filter: None,
                left_key: "k".into(),
                right_key: "k".into(),
                aggregate: Aggregate::Sum {
                    side: Side::Left,
                    column: "v".into(),
                },
            },
            sets,
            stats,
            schedule,
        },
    })
}

fn stale_base(config: &ScenarioConfig) -> Result<(Table, Table, Query)> {
    let seed = config.seed;
    let rows = config.left_rows.unwrap_or(4000);
    let orders = generate_table(
        &TableSpec {
            name: "orders".into(),
            row_count: rows,
            columns: vec![ColumnSpec::uniform("k", 0, 1999), ColumnSpec::uniform("v", 0, 999)],
        },
        derive(seed, 0x55_01),
    )?;
    let items = generate_table(
        &TableSpec {
            name: "items".into(),
            row_count: 4000,
            columns: vec![ColumnSpec::uniform("k", 0, 1999), ColumnSpec::uniform("w", 0, 999)],
        },
        derive(seed, 0x55_02),
    )?;
    let query = Query {
        left: "orders".into(),
        right: "items".into(),
        left_filter: Some(Predicate::new("v", Comparison::Lt, 10)),
        right_filter: Some(Predicate::new("w", Comparison::Lt, 20)),
        left_key: "k".into(),
        right_key: "k".into(),
        aggregate: Aggregate::Sum {
            side: Side::Left,
            column: "v".into(),
        },
    };
    Ok((orders, items, query))
}

fn shift(column: &str, by: i64) -> DriftSpec {
    DriftSpec {
        scale_factor: 1.0,
        domain_shift: by,
        skew_change: None,
        columns: Some(vec![column.into()]),
    }
}

fn skew(column: &str, s: f64) -> DriftSpec {
    DriftSpec {
        scale_factor: 1.0,
        domain_shift: 0,
        skew_change: Some(Distribution::Zipf { s }),
        columns: Some(vec![column.into()]),
    }
}

/// A fixed two-filter join whose statistics are captured once and never
/// refreshed while the filtered columns drift, one generation per quarter
/// of the run:
///
/// - gen 1 shifts both domains down, tripling both selectivities;
/// - gen 2 redraws both columns from Zipf laws: the build side lands around
///   9x its estimate (just under `rho_join`) while the probe side grows 25x;
/// - gen 3 steepens the build-side law to about 50x.
///
/// The planner picks nested loop from the tiny estimates throughout.
pub fn scenario_stale_stats(config: ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let seed = config.seed;
    let (orders, items, query) = stale_base(&config)?;
    let steps = [
        (shift("v", -20), shift("w", -40)),
        (skew("v", 0.333), skew("w", 0.86)),
        (skew("v", 0.964), DriftSpec::scale(1.0)),
    ];
    let mut sets = vec![("gen0".to_string(), table_map(vec![orders.clone(), items.clone()]))];
    let stats = stats_map(&sets[0].1);
    let (mut l, mut r) = (orders, items);
    for (g, (dl, dr)) in steps.iter().enumerate() {
        l = apply_drift(&l, dl, derive(seed, 0x55_10 + g as u64))?;
        r = apply_drift(&r, dr, derive(seed, 0x55_20 + g as u64))?;
        sets.push((format!("gen{}", g + 1), table_map(vec![l.clone(), r.clone()])));
    }
    let q = config.queries;
    let schedule = (0..q).map(|i| (i * sets.len() / q).min(sets.len() - 1)).collect();
    Ok(Scenario {
        kind: ScenarioKind::StaleStats,
        config,
        planner_model: CostModel::default(),
        workload: Workload::Sets {
            query,
            sets,
            stats,
            schedule,
        },
    })
}

pub fn scenario_control(config: ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let (orders, items, query) = stale_base(&config)?;
    let tables = table_map(vec![orders, items]);
    let stats = stats_map(&tables);
    let schedule = vec![0; config.queries];
    Ok(Scenario {
        kind: ScenarioKind::Control,
        config,
        planner_model: CostModel::default(),
        workload: Workload::Sets {
            query,
            sets: vec![("gen0".into(), tables)],
            stats,
            schedule,
        },
    })
}

fn break_even_query() -> Query {
    Query {
        left: "events".into(),
        right: "devices".into(),
        left_filter: Some(Predicate::new("v", Comparison::Lt, 1000)),
        right_filter: None,
        left_key: "k".into(),
        right_key: "k".into(),
        aggregate: Aggregate::Count,
    }
}

/// Filter-join-count over a fact table whose size is log-spaced across
/// `[1000, 100000]` (the default N* is 10,000). The filter passes every row
/// and the 16-row dimension matches each fact row about once, so both
/// offloadable operators see roughly the fact size. The planner's
/// accelerator setup is divided by `miscalibration`.
pub fn scenario_break_even(config: ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let (lo, hi) = (1000f64, 100_000f64);
    let q = config.queries;
    let sizes = (0..q)
        .map(|i| {
            let t = if q > 1 { i as f64 / (q - 1) as f64 } else { 0.0 };
            (lo.ln() + (hi.ln() - lo.ln()) * t).exp().round() as u64
        })
        .collect();
    let dim = generate_table(
        &TableSpec {
            name: "devices".into(),
            row_count: 16,
            columns: vec![ColumnSpec::uniform("k", 0, 15)],
        },
        derive(config.seed, 0xBE_01),
    )?;
    let mut planner_model = CostModel::default();
    for op in OpKind::OFFLOADABLE {
        planner_model
            .primitive_mut(op)
            .expect("offloadable")
            .accelerator
            .setup /= config.miscalibration;
    }
    Ok(Scenario {
        kind: ScenarioKind::BreakEven,
        config,
        planner_model,
        workload: Workload::BreakEven { sizes, dim },
    })
}
