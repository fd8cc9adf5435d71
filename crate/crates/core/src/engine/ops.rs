//! Operator kernels. Every variant of an operator produces the same multiset
//! of rows; only the way it gets there differs.
//!
//! The accelerator kernels run on the host but follow a device-style
//! dataflow: stage a batch into a transfer buffer, compute over the buffer,
//! then copy results back.

use std::collections::HashMap;

use crate::stats::Comparison;

pub type RowId = u32;

pub fn scan(rows: usize) -> Vec<RowId> {
    (0..rows as RowId).collect()
}

pub fn filter_cpu(values: &[i64], input: &[RowId], op: Comparison, constant: i64) -> Vec<RowId> {
    input
        .iter()
        .copied()
        .filter(|&r| op.eval(values[r as usize], constant))
        .collect()
}

pub fn filter_accelerator(
    values: &[i64],
    input: &[RowId],
    op: Comparison,
    constant: i64,
    batch: usize,
) -> Vec<RowId> {
    let mut out = Vec::new();
    let mut staged = Vec::with_capacity(batch);
    let mut mask = Vec::with_capacity(batch);
    for chunk in input.chunks(batch.max(1)) {
        staged.clear();
        staged.extend(chunk.iter().map(|&r| values[r as usize]));
        mask.clear();
        mask.extend(staged.iter().map(|&v| op.eval(v, constant) as u8));
        out.extend(chunk.iter().zip(&mask).filter(|(_, &m)| m == 1).map(|(&r, _)| r));
    }
    out
}

/// Emits `(build_row, probe_row)` for every matching pair.
pub fn nested_loop_join(
    build_keys: &[i64],
    build_rows: &[RowId],
    probe_keys: &[i64],
    probe_rows: &[RowId],
) -> Vec<(RowId, RowId)> {
    let mut out = Vec::new();
    for &b in build_rows {
        let bk = build_keys[b as usize];
        for &p in probe_rows {
            if probe_keys[p as usize] == bk {
                out.push((b, p));
            }
        }
    }
    out
}

pub fn hash_join(
    build_keys: &[i64],
    build_rows: &[RowId],
    probe_keys: &[i64],
    probe_rows: &[RowId],
) -> Vec<(RowId, RowId)> {
    let mut table: HashMap<i64, Vec<RowId>> = HashMap::with_capacity(build_rows.len());
    for &b in build_rows {
        table.entry(build_keys[b as usize]).or_default().push(b);
    }
    let mut out = Vec::new();
    for &p in probe_rows {
        if let Some(matches) = table.get(&probe_keys[p as usize]) {
            out.extend(matches.iter().map(|&b| (b, p)));
        }
    }
    out
}

/// Wrapping sum; commutative, so every evaluation order agrees bitwise.
pub fn sum_cpu(values: impl Iterator<Item = i64>) -> i64 {
    values.fold(0i64, i64::wrapping_add)
}

pub fn sum_accelerator(values: impl Iterator<Item = i64>, batch: usize) -> i64 {
    let mut staged = Vec::with_capacity(batch);
    let mut total = 0i64;
    let mut values = values.peekable();
    while values.peek().is_some() {
        staged.clear();
        staged.extend(values.by_ref().take(batch.max(1)));
        total = total.wrapping_add(staged.iter().fold(0i64, |a, &v| a.wrapping_add(v)));
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filters_agree() {
        let values: Vec<i64> = (0..5000).map(|i| (i * 7919) % 1000).collect();
        let input = scan(values.len());
        for op in [Comparison::Lt, Comparison::Le, Comparison::Eq, Comparison::Ge, Comparison::Gt] {
            let a = filter_cpu(&values, &input, op, 400);
            let b = filter_accelerator(&values, &input, op, 400, 1024);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn joins_agree() {
        let bk: Vec<i64> = (0..50).map(|i| i % 7).collect();
        let pk: Vec<i64> = (0..60).map(|i| i % 5).collect();
        let mut a = nested_loop_join(&bk, &scan(50), &pk, &scan(60));
        let mut b = hash_join(&bk, &scan(50), &pk, &scan(60));
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        let oracle = (0..50)
            .flat_map(|i| (0..60).map(move |j| (i, j)))
            .filter(|&(i, j)| bk[i] == pk[j])
            .count();
        assert_eq!(a.len(), oracle);
    }

    #[test]
    fn sums_agree() {
        let v: Vec<i64> = (0..3000).map(|i| i * 31 - 7000).collect();
        assert_eq!(sum_cpu(v.iter().copied()), sum_accelerator(v.iter().copied(), 1024));
        assert_eq!(sum_accelerator(std::iter::empty(), 1024), 0);
    }
}
