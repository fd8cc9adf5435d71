//! Optimizer-side statistics: per-column row count, NDV and an equi-width
//! histogram, stamped with the table generation they were captured at.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Table;
use crate::error::{Error, Result};
use crate::policy::RiskWeights;

pub const DEFAULT_BUCKETS: usize = 32;

/// Half-open value range `[lo, hi)`; integer `x` occupies `[x, x + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub row_count: u64,
    pub ndv: u64,
    pub min: Option<i64>,
    pub max: Option<i64>,
    pub buckets: Vec<Bucket>,
    pub captured_generation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableStats {
    pub table: String,
    pub row_count: u64,
    pub captured_generation: u64,
    pub columns: BTreeMap<String, ColumnStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
}

impl Comparison {
    pub fn eval(self, value: i64, constant: i64) -> bool {
        match self {
            Comparison::Lt => value < constant,
            Comparison::Le => value <= constant,
            Comparison::Eq => value == constant,
            Comparison::Ge => value >= constant,
            Comparison::Gt => value > constant,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparison::Lt => "<",
            Comparison::Le => "<=",
            Comparison::Eq => "=",
            Comparison::Ge => ">=",
            Comparison::Gt => ">",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predicate {
    pub column: String,
    pub op: Comparison,
    pub constant: i64,
}

impl Predicate {
    pub fn new(column: &str, op: Comparison, constant: i64) -> Self {
        Predicate {
            column: column.to_string(),
            op,
            constant,
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.column, self.op.symbol(), self.constant)
    }
}

/// A cardinality or selectivity estimate with a dimensionless dispersion
/// score. `variance_proxy` is the share of the estimate that rests on
/// interpolation inside partially covered buckets, or `1 - 1/ndv` for
/// equality predicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub variance_proxy: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate {
            value,
            variance_proxy: 0.0,
        }
    }
}

pub fn capture_statistics(table: &Table) -> TableStats {
    capture_statistics_with(table, DEFAULT_BUCKETS)
}

pub fn capture_statistics_with(table: &Table, buckets: usize) -> TableStats {
    let buckets = buckets.max(1);
    let columns = table
        .column_names()
        .map(|name| {
            let values = table.column(name).expect("column listed by the table");
            (
                name.to_string(),
                ColumnStats::capture(values, buckets, table.generation()),
            )
        })
        .collect();
    TableStats {
        table: table.name().to_string(),
        row_count: table.row_count() as u64,
        captured_generation: table.generation(),
        columns,
    }
}

impl ColumnStats {
    pub fn capture(values: &[i64], buckets: usize, generation: u64) -> Self {
        let (min, max) = match (values.iter().min(), values.iter().max()) {
            (Some(&lo), Some(&hi)) => (lo, hi),
            _ => {
                return ColumnStats {
                    row_count: 0,
                    ndv: 0,
                    min: None,
                    max: None,
                    buckets: vec![
                        Bucket {
                            lo: 0.0,
                            hi: 0.0,
                            count: 0
                        };
                        buckets
                    ],
                    captured_generation: generation,
                };
            }
        };

        let mut sorted = values.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let ndv = sorted.len() as u64;

        let lo = min as f64;
        let width = (max as f64 + 1.0 - lo) / buckets as f64;
        let mut hist: Vec<Bucket> = (0..buckets)
            .map(|i| Bucket {
                lo: lo + i as f64 * width,
                hi: if i + 1 == buckets {
                    max as f64 + 1.0
                } else {
                    lo + (i + 1) as f64 * width
                },
                count: 0,
            })
            .collect();
        for &v in values {
            let idx = (((v - min) as f64) / width) as usize;
            hist[idx.min(buckets - 1)].count += 1;
        }

        ColumnStats {
            row_count: values.len() as u64,
            ndv,
            min: Some(min),
            max: Some(max),
            buckets: hist,
            captured_generation: generation,
        }
    }

    pub fn bucket_width(&self) -> f64 {
        match (self.min, self.max) {
            (Some(lo), Some(hi)) => (hi as f64 + 1.0 - lo as f64) / self.buckets.len() as f64,
            _ => 0.0,
        }
    }

    pub fn selectivity(&self, op: Comparison, constant: i64) -> Estimate {
        if self.row_count == 0 {
            return Estimate::exact(0.0);
        }
        if op == Comparison::Eq {
            let (lo, hi) = (self.min.unwrap_or(0), self.max.unwrap_or(0));
            if constant < lo || constant > hi || self.ndv == 0 {
                return Estimate::exact(0.0);
            }
            let inv = 1.0 / self.ndv as f64;
            return Estimate {
                value: inv,
                variance_proxy: 1.0 - inv,
            };
        }

        let c = constant as f64;
        let (from, to) = match op {
            Comparison::Lt => (f64::NEG_INFINITY, c),
            Comparison::Le => (f64::NEG_INFINITY, c + 1.0),
            Comparison::Gt => (c + 1.0, f64::INFINITY),
            Comparison::Ge => (c, f64::INFINITY),
            Comparison::Eq => unreachable!(),
        };

        let mut full = 0.0;
        let mut partial = 0.0;
        for b in &self.buckets {
            let width = b.hi - b.lo;
            if b.count == 0 || width <= 0.0 {
                continue;
            }
            let overlap = (to.min(b.hi) - from.max(b.lo)).max(0.0);
            if overlap >= width {
                full += b.count as f64;
            } else if overlap > 0.0 {
                partial += b.count as f64 * overlap / width;
            }
        }
        let total = full + partial;
        let value = (total / self.row_count as f64).clamp(0.0, 1.0);
        let variance_proxy = if total > 0.0 { partial / total } else { 0.0 };
        Estimate {
            value,
            variance_proxy,
        }
    }
}

impl TableStats {
    pub fn column(&self, name: &str) -> Result<&ColumnStats> {
        self.columns
            .get(name)
            .ok_or_else(|| Error::UnknownColumn(format!("{}.{}", self.table, name)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn estimate_selectivity(stats: &TableStats, pred: &Predicate) -> Result<Estimate> {
    Ok(stats.column(&pred.column)?.selectivity(pred.op, pred.constant))
}

/// `R_opt = w_variance * variance_proxy + w_staleness * (current - captured)`.
pub fn optimizer_risk(
    captured_generation: u64,
    estimate: &Estimate,
    current_generation: u64,
    weights: &RiskWeights,
) -> Result<f64> {
    if current_generation < captured_generation {
        return Err(Error::GenerationRegression {
            current: current_generation,
            captured: captured_generation,
        });
    }
    let staleness = (current_generation - captured_generation) as f64;
    Ok(weights.variance * estimate.variance_proxy + weights.staleness * staleness)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{apply_drift, generate_table, ColumnSpec, DriftSpec, TableSpec};

    fn uniform_table(rows: u64, seed: u64) -> Table {
        let spec = TableSpec {
            name: "u".into(),
            row_count: rows,
            columns: vec![ColumnSpec::uniform("v", 0, 99)],
        };
        generate_table(&spec, seed).unwrap()
    }

    fn brute_selectivity(values: &[i64], op: Comparison, c: i64) -> f64 {
        values.iter().filter(|&&v| op.eval(v, c)).count() as f64 / values.len() as f64
    }

    #[test]
    fn empty_table_stats() {
        let s = capture_statistics(&uniform_table(0, 1));
        let c = s.column("v").unwrap();
        assert_eq!((c.row_count, c.ndv), (0, 0));
        assert_eq!(c.buckets.len(), DEFAULT_BUCKETS);
        assert!(c.buckets.iter().all(|b| b.count == 0));
        assert_eq!(c.selectivity(Comparison::Lt, 5).value, 0.0);
    }

    #[test]
    fn uniform_histogram_counts() {
        let t = uniform_table(1000, 3);
        let s = capture_statistics_with(&t, 10);
        let c = s.column("v").unwrap();
        let values = t.column("v").unwrap();
        assert_eq!(c.buckets.iter().map(|b| b.count).sum::<u64>(), 1000);
        // exact per-bucket counts by full scan, plus a 5-sigma binomial bound
        let sigma = (1000.0f64 * 0.1 * 0.9).sqrt();
        for (i, b) in c.buckets.iter().enumerate() {
            let lo = i as i64 * 10;
            let exact = values.iter().filter(|&&v| v >= lo && v < lo + 10).count() as u64;
            assert_eq!(b.count, exact);
            assert!((b.count as f64 - 100.0).abs() <= 5.0 * sigma);
        }
    }

    #[test]
    fn captured_generation_lags_after_drift() {
        let t = uniform_table(100, 1);
        let s = capture_statistics(&t);
        let d = apply_drift(&t, &DriftSpec::scale(1.0), 1).unwrap();
        assert_eq!(d.generation() - s.captured_generation, 1);
    }

    #[test]
    fn selectivity_examples() {
        let t = uniform_table(1000, 5);
        let s = capture_statistics(&t);
        let c = s.column("v").unwrap();
        let min = c.min.unwrap();
        let full = c.selectivity(Comparison::Ge, min);
        assert_eq!(full.value, 1.0);
        assert_eq!(full.variance_proxy, 0.0);

        let half = c.selectivity(Comparison::Lt, 50);
        let truth = brute_selectivity(t.column("v").unwrap(), Comparison::Lt, 50);
        let width = c.bucket_width() / 100.0;
        assert!((half.value - 0.5).abs() <= width + 0.05, "{}", half.value);
        assert!((half.value - truth).abs() <= 1.5 * width, "{} vs {}", half.value, truth);

        let eq = c.selectivity(Comparison::Eq, 10);
        assert_eq!(c.ndv, 100);
        assert!((eq.value - 0.01).abs() < 1e-15);
        assert_eq!(c.selectivity(Comparison::Eq, 1000).value, 0.0);

        assert!(matches!(
            estimate_selectivity(&s, &Predicate::new("nope", Comparison::Lt, 1)),
            Err(Error::UnknownColumn(_))
        ));
    }

    #[test]
    fn partial_buckets_raise_variance() {
        let s = capture_statistics(&uniform_table(1000, 5));
        let c = s.column("v").unwrap();
        assert!(c.selectivity(Comparison::Lt, 51).variance_proxy > 0.0);
    }

    #[test]
    fn optimizer_risk_examples() {
        let w = RiskWeights::default();
        assert_eq!(optimizer_risk(0, &Estimate::exact(0.4), 0, &w).unwrap(), 0.0);
        assert_eq!(optimizer_risk(0, &Estimate::exact(0.4), 1, &w).unwrap(), 1.0);
        let est = Estimate {
            value: 0.1,
            variance_proxy: 0.3,
        };
        let w = RiskWeights {
            variance: 1.0,
            staleness: 0.5,
        };
        let r = optimizer_risk(3, &est, 5, &w).unwrap();
        assert!((r - 1.3).abs() < 1e-12);
        assert!(matches!(
            optimizer_risk(2, &est, 1, &w),
            Err(Error::GenerationRegression { .. })
        ));
    }

    #[test]
    fn stats_round_trip_file() {
        let s = capture_statistics(&uniform_table(200, 2));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.json");
        s.save(&path).unwrap();
        assert_eq!(TableStats::load(&path).unwrap(), s);
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        fn op() -> impl Strategy<Value = Comparison> {
            prop_oneof![
                Just(Comparison::Lt),
                Just(Comparison::Le),
                Just(Comparison::Eq),
                Just(Comparison::Ge),
                Just(Comparison::Gt)
            ]
        }

        proptest! {
            #[test]
            fn conservation_and_bounds(
                values in proptest::collection::vec(-500i64..500, 0..300),
                buckets in 1usize..40,
                op in op(),
                c in -600i64..600,
            ) {
                let s = ColumnStats::capture(&values, buckets, 0);
                prop_assert_eq!(s.buckets.iter().map(|b| b.count).sum::<u64>(), values.len() as u64);
                prop_assert!(s.ndv <= s.row_count);
                let e = s.selectivity(op, c);
                prop_assert!((0.0..=1.0).contains(&e.value));
                prop_assert!(e.variance_proxy >= 0.0);
            }

            #[test]
            fn range_estimates_track_truth(seed in 0u64..1000, rows in 100u64..10_000, c in 0i64..100) {
                let t = uniform_table(rows, seed);
                let s = capture_statistics(&t);
                let col = s.column("v").unwrap();
                let width = col.bucket_width() / (col.max.unwrap() - col.min.unwrap() + 1) as f64;
                for op in [Comparison::Lt, Comparison::Le, Comparison::Gt, Comparison::Ge] {
                    let est = col.selectivity(op, c).value;
                    let truth = brute_selectivity(t.column("v").unwrap(), op, c);
                    prop_assert!((est - truth).abs() <= 1.5 * width, "{:?} {} {} {}", op, c, est, truth);
                }
            }

            #[test]
            fn staleness_monotone(var in 0.0f64..2.0, captured in 0u64..5, a in 0u64..10, b in 0u64..10) {
                let est = Estimate { value: 0.5, variance_proxy: var };
                let w = RiskWeights::default();
                let (lo, hi) = (captured + a.min(b), captured + a.max(b));
                prop_assert!(optimizer_risk(captured, &est, lo, &w).unwrap()
                    <= optimizer_risk(captured, &est, hi, &w).unwrap());
            }
        }
    }
}
