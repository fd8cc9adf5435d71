//! Deterministic synthetic tables and controlled drift.
//!
//! Columns are `i64` vectors. Each column draws from its own ChaCha8 stream
//! (see [`crate::rng`]), so adding a column never perturbs the others.
//!
//! Zipf columns sample from a precomputed cumulative table over the integer
//! domain `low..=high`: rank `k` (1-based) has weight `k^-s` and maps to the
//! value `low + k - 1`. A uniform `u` in `[0, 1)` selects the first rank whose
//! cumulative weight exceeds `u`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Uniform,
    Zipf { s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub low: i64,
    pub high: i64,
    pub distribution: Distribution,
}

impl ColumnSpec {
    pub fn uniform(name: &str, low: i64, high: i64) -> Self {
        ColumnSpec {
            name: name.to_string(),
            low,
            high,
            distribution: Distribution::Uniform,
        }
    }

    pub fn zipf(name: &str, low: i64, high: i64, s: f64) -> Self {
        ColumnSpec {
            name: name.to_string(),
            low,
            high,
            distribution: Distribution::Zipf { s },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.low > self.high {
            return Err(Error::Validation(format!(
                "column `{}`: empty range {}..={}",
                self.name, self.low, self.high
            )));
        }
        if let Distribution::Zipf { s } = self.distribution {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Validation(format!(
                    "column `{}`: zipf skew must be > 0, got {s}",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSpec {
    pub name: String,
    pub row_count: u64,
    pub columns: Vec<ColumnSpec>,
}

impl TableSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Validation("table name is empty".into()));
        }
        for (i, c) in self.columns.iter().enumerate() {
            c.validate()?;
            if self.columns[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::Validation(format!("duplicate column `{}`", c.name)));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: TableSpec =
            serde_json::from_str(text).map_err(|e| Error::Validation(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// A generated table. `generation` is 0 at creation and +1 per drift.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    spec: TableSpec,
    generation: u64,
    columns: Vec<Vec<i64>>,
}

impl Table {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn spec(&self) -> &TableSpec {
        &self.spec
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn row_count(&self) -> usize {
        self.columns.first().map_or(self.spec.row_count as usize, Vec::len)
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.spec.columns.iter().map(|c| c.name.as_str())
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.spec
            .columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownColumn(format!("{}.{}", self.spec.name, name)))
    }

    pub fn column(&self, name: &str) -> Result<&[i64]> {
        Ok(&self.columns[self.column_index(name)?])
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.column_names())?;
        for row in 0..self.row_count() {
            w.write_record(self.columns.iter().map(|c| c[row].to_string()))?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Row-count multiplier, value offset and optional distribution replacement.
///
/// `columns` restricts the shift and distribution change to the named
/// columns; `None` means every column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSpec {
    pub scale_factor: f64,
    #[serde(default)]
    pub domain_shift: i64,
    #[serde(default)]
    pub skew_change: Option<Distribution>,
    #[serde(default)]
    pub columns: Option<Vec<String>>,
}

impl DriftSpec {
    pub fn scale(scale_factor: f64) -> Self {
        DriftSpec {
            scale_factor,
            domain_shift: 0,
            skew_change: None,
            columns: None,
        }
    }

    fn touches(&self, column: &str) -> bool {
        self.columns
            .as_ref()
            .is_none_or(|cols| cols.iter().any(|c| c == column))
    }
}

struct ZipfTable {
    cdf: Vec<f64>,
}

impl ZipfTable {
    fn new(domain: u64, s: f64) -> Self {
        let mut cdf = Vec::with_capacity(domain as usize);
        let mut acc = 0.0;
        for k in 1..=domain {
            acc += (k as f64).powf(-s);
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        ZipfTable { cdf }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|&c| c <= u);
        idx.min(self.cdf.len() - 1) as u64
    }
}

fn fill_column<R: Rng>(spec: &ColumnSpec, rows: usize, rng: &mut R, out: &mut Vec<i64>) {
    out.reserve(rows);
    match spec.distribution {
        Distribution::Uniform => {
            out.extend((0..rows).map(|_| rng.random_range(spec.low..=spec.high)));
        }
        Distribution::Zipf { s } => {
            let domain = (spec.high as i128 - spec.low as i128 + 1) as u64;
            let table = ZipfTable::new(domain, s);
            out.extend((0..rows).map(|_| spec.low + table.sample(rng) as i64));
        }
    }
}

pub fn generate_table(spec: &TableSpec, seed: u64) -> Result<Table> {
    spec.validate()?;
    let rows = spec.row_count as usize;
    let columns = spec
        .columns
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = stream_rng(seed, i as u64);
            let mut values = Vec::new();
            fill_column(c, rows, &mut rng, &mut values);
            values
        })
        .collect();
    Ok(Table {
        spec: spec.clone(),
        generation: 0,
        columns,
    })
}

/// Returns a drifted copy of `table` with `generation + 1`.
///
/// Surviving rows keep their values unless their column changes
/// distribution, in which case the whole column is redrawn. Appended rows are
/// drawn from the (possibly replaced) distribution. The shift is applied last
/// and also moves the column's declared range.
pub fn apply_drift(table: &Table, drift: &DriftSpec, seed: u64) -> Result<Table> {
    if !(drift.scale_factor > 0.0 && drift.scale_factor.is_finite()) {
        return Err(Error::Validation(format!(
            "scale_factor must be > 0, got {}",
            drift.scale_factor
        )));
    }
    if let Some(cols) = &drift.columns {
        for c in cols {
            table.column_index(c)?;
        }
    }
    let old_rows = table.row_count();
    let new_rows = (old_rows as f64 * drift.scale_factor).round() as usize;
    let generation = table.generation + 1;
    let drift_seed = derive(seed, generation);

    let mut spec = table.spec.clone();
    spec.row_count = new_rows as u64;
    let mut columns = Vec::with_capacity(spec.columns.len());
    for (i, (col_spec, old)) in spec.columns.iter_mut().zip(&table.columns).enumerate() {
        let touched = drift.touches(&col_spec.name);
        let mut rng = stream_rng(drift_seed, i as u64);
        let mut values = Vec::with_capacity(new_rows);
        match drift.skew_change {
            Some(dist) if touched => {
                col_spec.distribution = dist;
                col_spec.validate()?;
                fill_column(col_spec, new_rows, &mut rng, &mut values);
            }
            _ => {
                values.extend_from_slice(&old[..old_rows.min(new_rows)]);
                fill_column(col_spec, new_rows - values.len(), &mut rng, &mut values);
            }
        }
        if touched && drift.domain_shift != 0 {
            for v in &mut values {
                *v += drift.domain_shift;
            }
            col_spec.low += drift.domain_shift;
            col_spec.high += drift.domain_shift;
        }
        columns.push(values);
    }
    Ok(Table {
        spec,
        generation,
        columns,
    })
}
