//! Accelerator cost device: microbenchmarks, affine fits, and break-even.
//!
//! The device is the cost model itself: each measurement runs the real kernel
//! on a seeded column and charges the profile's cost through the clock.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{ops, ClockMode};
use crate::error::{Error, Result};
use crate::planner::{cost, Cardinalities, CostModel, OpKind, Variant};
use crate::rng::{derive, stream_rng};

pub use crate::engine::accelerator_risk;

/// Per-device coefficients; the same shape the planner uses.
pub type DeviceProfile = CostModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    Cpu,
    Accelerator,
}

impl Device {
    pub const ALL: [Device; 2] = [Device::Cpu, Device::Accelerator];

    pub fn variant(self) -> Variant {
        match self {
            Device::Cpu => Variant::Cpu,
            Device::Accelerator => Variant::Accelerator,
        }
    }

    pub fn name(self) -> &'static str {
        self.variant().name()
    }
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub op_kind: OpKind,
    pub device: Device,
    pub n: u64,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual over mean cost.
    pub residual: f64,
    /// Standard error of the slope; zero for exact or two-point fits.
    pub slope_stderr: f64,
}

impl LinearFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.slope * n + self.intercept
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreakEven {
    pub op_kind: OpKind,
    pub n_star_estimated: f64,
    /// Empirical crossover; `None` when the measured grid never crosses.
    pub n_star_observed: Option<f64>,
    pub relative_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum BreakEvenOutcome {
    Found(BreakEven),
    NoBreakEven,
}

impl BreakEvenOutcome {
    pub fn n_star(&self) -> Option<f64> {
        match self {
            BreakEvenOutcome::Found(b) => Some(b.n_star_estimated),
            BreakEvenOutcome::NoBreakEven => None,
        }
    }
}

fn kernel_input(n: u64, seed: u64) -> Vec<i64> {
    let mut rng = stream_rng(seed, n);
    (0..n).map(|_| rng.random_range(0..1000)).collect()
}

/// One measurement per (size, repetition), charged in that order.
pub fn run_microbenchmark(
    op: OpKind,
    sizes: &[u64],
    device: Device,
    profile: &DeviceProfile,
    clock: ClockMode,
    reps: usize,
    seed: u64,
) -> Result<Vec<Measurement>> {
    if !op.is_offloadable() {
        return Err(Error::Validation(format!("{op} has no accelerator variant")));
    }
    if sizes.is_empty() {
        return Err(Error::Empty("microbenchmark size list"));
    }
    if reps < 1 {
        return Err(Error::Validation("repetitions must be >= 1".into()));
    }
    if sizes[0] == 0 {
        return Err(Error::Validation("microbenchmark sizes must be > 0".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation("microbenchmark sizes must be strictly increasing".into()));
    }
    profile.validate()?;
    let seed = derive(derive(seed, op as u64), device as u64);
    let mut out = Vec::with_capacity(sizes.len() * reps);
    for (i, &n) in sizes.iter().enumerate() {
        let values = kernel_input(n, seed);
        let rows = ops::scan(n as usize);
        let model_cost = cost(op, device.variant(), Cardinalities::Unary(n as f64), profile)?;
        for r in 0..reps {
            let stream = (i * reps + r) as u64;
            let (_, c) = clock.charge(seed, stream, model_cost, || match (op, device) {
                (OpKind::Filter, Device::Cpu) => {
                    ops::filter_cpu(&values, &rows, crate::stats::Comparison::Lt, 500).len() as i64
                }
                (OpKind::Filter, Device::Accelerator) => {
                    ops::filter_accelerator(&values, &rows, crate::stats::Comparison::Lt, 500, 1024).len() as i64
                }
                (_, Device::Cpu) => ops::sum_cpu(values.iter().copied()),
                (_, Device::Accelerator) => ops::sum_accelerator(values.iter().copied(), 1024),
            });
            out.push(Measurement {
                op_kind: op,
                device,
                n,
                cost: c,
            });
        }
    }
    Ok(out)
}

/// Ordinary least squares of cost on N.
pub fn fit_linear(measurements: &[Measurement]) -> Result<LinearFit> {
    if measurements.is_empty() {
        return Err(Error::Empty("measurements to fit"));
    }
    let k = measurements.len() as f64;
    let mean_x = measurements.iter().map(|m| m.n as f64).sum::<f64>() / k;
    let mean_y = measurements.iter().map(|m| m.cost).sum::<f64>() / k;
    let sxx: f64 = measurements.iter().map(|m| (m.n as f64 - mean_x).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::RankDeficient);
    }
    let sxy: f64 = measurements
        .iter()
        .map(|m| (m.n as f64 - mean_x) * (m.cost - mean_y))
        .sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let sse: f64 = measurements
        .iter()
        .map(|m| (m.cost - (slope * m.n as f64 + intercept)).powi(2))
        .sum();
    let residual = if mean_y != 0.0 { (sse / k).sqrt() / mean_y.abs() } else { 0.0 };
    let slope_stderr = if measurements.len() > 2 {
        (sse / (k - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LinearFit {
        slope,
        intercept,
        residual,
        slope_stderr,
    })
}

/// Per-size mean cost of one device, sizes ascending.
fn mean_costs(measurements: &[Measurement], device: Device) -> BTreeMap<u64, f64> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for m in measurements.iter().filter(|m| m.device == device) {
        let e = acc.entry(m.n).or_default();
        e.0 += m.cost;
        e.1 += 1;
    }
    acc.into_iter().map(|(n, (s, c))| (n, s / c as f64)).collect()
}

/// Crossover from measured per-size means, interpolated between the last
/// size where the cpu wins and the first where the accelerator wins.
pub fn observed_crossover(measurements: &[Measurement]) -> Option<f64> {
    let cpu = mean_costs(measurements, Device::Cpu);
    let acc = mean_costs(measurements, Device::Accelerator);
    let d: Vec<(f64, f64)> = cpu
        .iter()
        .filter_map(|(n, c)| acc.get(n).map(|a| (*n as f64, c - a)))
        .collect();
    if let Some(&(n, _)) = d.iter().find(|(_, di)| *di == 0.0) {
        return Some(n);
    }
    d.windows(2).find(|w| w[0].1 < 0.0 && w[1].1 > 0.0).map(|w| {
        let ((n0, d0), (n1, d1)) = (w[0], w[1]);
        n0 + (n1 - n0) * (-d0) / (d1 - d0)
    })
}

/// Crossover of the fitted lines. A slope gap indistinguishable from noise
/// (within three standard errors) counts as no break-even.
pub fn break_even(
    op: OpKind,
    cpu: &LinearFit,
    accel: &LinearFit,
    measurements: &[Measurement],
) -> BreakEvenOutcome {
    let gap = cpu.slope - accel.slope;
    let noise = 3.0 * cpu.slope_stderr.hypot(accel.slope_stderr);
    if !(gap > 0.0) || gap <= noise {
        return BreakEvenOutcome::NoBreakEven;
    }
    let n_star_estimated = ((accel.intercept - cpu.intercept) / gap).max(1.0);
    let n_star_observed = observed_crossover(measurements);
    BreakEvenOutcome::Found(BreakEven {
        op_kind: op,
        n_star_estimated,
        n_star_observed,
        relative_error: n_star_observed.map(|obs| (n_star_estimated - obs).abs() / obs),
    })
}

/// Eight log-spaced sizes over `[center/10, 10*center]`, rounded.
pub fn default_sizes(center: f64) -> Vec<u64> {
    log_sizes(center / 10.0, center * 10.0, 8)
}

pub fn log_sizes(lo: f64, hi: f64, count: usize) -> Vec<u64> {
    if count == 1 {
        return vec![lo.round().max(1.0) as u64];
    }
    let (a, b) = (lo.max(1.0).ln(), hi.max(1.0).ln());
    let mut sizes: Vec<u64> = (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp().round() as u64)
        .collect();
    sizes.dedup();
    sizes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpCalibration {
    pub op_kind: OpKind,
    pub measurements: Vec<Measurement>,
    pub cpu_fit: LinearFit,
    pub accel_fit: LinearFit,
    pub outcome: BreakEvenOutcome,
}

/// Microbenchmarks both devices for one op kind and derives its break-even.
pub fn calibrate_op(
    op: OpKind,
    sizes: &[u64],
    profile: &DeviceProfile,
    clock: ClockMode,
    reps: usize,
    seed: u64,
) -> Result<OpCalibration> {
    let mut measurements = run_microbenchmark(op, sizes, Device::Cpu, profile, clock, reps, seed)?;
    let cpu_fit = fit_linear(&measurements)?;
    let accel = run_microbenchmark(op, sizes, Device::Accelerator, profile, clock, reps, seed)?;
    let accel_fit = fit_linear(&accel)?;
    measurements.extend(accel);
    let outcome = break_even(op, &cpu_fit, &accel_fit, &measurements);
    Ok(OpCalibration {
        op_kind: op,
        measurements,
        cpu_fit,
        accel_fit,
        outcome,
    })
}

/// Calibrates every offloadable kind on the default grid around the
/// profile's analytic crossover (10,000 when the profile has none).
pub fn run_calibration(
    profile: &DeviceProfile,
    clock: ClockMode,
    reps: usize,
    seed: u64,
) -> Result<Vec<OpCalibration>> {
    OpKind::OFFLOADABLE
        .into_iter()
        .map(|op| {
            let center = profile
                .primitive(op)
                .and_then(|p| p.break_even())
                .filter(|n| *n >= 1.0)
                .unwrap_or(10_000.0);
            calibrate_op(op, &default_sizes(center), profile, clock, reps, seed)
        })
        .collect()
}

pub fn outcomes(cals: &[OpCalibration]) -> BTreeMap<OpKind, BreakEvenOutcome> {
    cals.iter().map(|c| (c.op_kind, c.outcome)).collect()
}

pub fn write_measurements_csv<W: Write>(cals: &[OpCalibration], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["op_kind", "device", "n", "cost"])?;
    for m in cals.iter().flat_map(|c| &c.measurements) {
        w.write_record([m.op_kind.to_string(), m.device.to_string(), m.n.to_string(), m.cost.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn write_fits_csv<W: Write>(cals: &[OpCalibration], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["device", "op_kind", "slope", "intercept", "residual"])?;
    for c in cals {
        for (device, fit) in [(Device::Cpu, c.cpu_fit), (Device::Accelerator, c.accel_fit)] {
            w.write_record([
                device.to_string(),
                c.op_kind.to_string(),
                fit.slope.to_string(),
                fit.intercept.to_string(),
                fit.residual.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EXACT: ClockMode = ClockMode::Simulated { sigma: 0.0 };

    fn pts(op: OpKind, device: Device, xy: &[(u64, f64)]) -> Vec<Measurement> {
        xy.iter()
            .map(|&(n, cost)| Measurement {
                op_kind: op,
                device,
                n,
                cost,
            })
            .collect()
    }

    /// Normal equations solved by Cramer's rule, independent of `fit_linear`.
    fn ols_oracle(xy: &[(f64, f64)]) -> (f64, f64) {
        let k = xy.len() as f64;
        let sx: f64 = xy.iter().map(|p| p.0).sum();
        let sy: f64 = xy.iter().map(|p| p.1).sum();
        let sxx: f64 = xy.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = xy.iter().map(|p| p.0 * p.1).sum();
        let det = k * sxx - sx * sx;
        ((k * sxy - sx * sy) / det, (sxx * sy - sx * sxy) / det)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn noise_free_measurements_equal_model_cost() {
        let m = run_microbenchmark(OpKind::Filter, &[1000], Device::Cpu, &CostModel::default(), EXACT, 3, 1).unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.iter().all(|x| x.cost == 1000.0));
        let m = run_microbenchmark(OpKind::Filter, &[1000, 10_000], Device::Cpu, &CostModel::default(), EXACT, 1, 1)
            .unwrap();
        assert_eq!(m.iter().map(|x| x.cost).collect::<Vec<_>>(), vec![1000.0, 10_000.0]);
        let m = run_microbenchmark(OpKind::Aggregate, &[10_000], Device::Accelerator, &CostModel::default(), EXACT, 1, 1)
            .unwrap();
        assert!((m[0].cost - 10_000.0).abs() < 1e-9);
    }

    #[test]
    fn microbenchmark_preconditions() {
        let p = CostModel::default();
        let run = |sizes: &[u64], reps| run_microbenchmark(OpKind::Filter, sizes, Device::Cpu, &p, EXACT, reps, 0);
        assert!(matches!(run(&[], 1), Err(Error::Empty(_))));
        assert!(matches!(run(&[10, 10], 1), Err(Error::Validation(_))));
        assert!(matches!(run(&[20, 10], 1), Err(Error::Validation(_))));
        assert!(matches!(run(&[0, 10], 1), Err(Error::Validation(_))));
        assert!(matches!(run(&[10], 0), Err(Error::Validation(_))));
        assert!(run_microbenchmark(OpKind::Join, &[10], Device::Cpu, &p, EXACT, 1, 0).is_err());
    }

    #[test]
    fn noisy_microbenchmark_is_deterministic() {
        let p = CostModel::default();
        let clock = ClockMode::Simulated { sigma: 0.05 };
        let a = run_microbenchmark(OpKind::Aggregate, &[100, 200], Device::Accelerator, &p, clock, 4, 9).unwrap();
        let b = run_microbenchmark(OpKind::Aggregate, &[100, 200], Device::Accelerator, &p, clock, 4, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|m| m.cost > 0.0));
    }

    #[test]
    fn exact_line_fits() {
        let f = fit_linear(&pts(OpKind::Filter, Device::Cpu, &[(1000, 1000.0), (2000, 2000.0)])).unwrap();
        assert!(rel(f.slope, 1.0) < 1e-12);
        assert!(f.intercept.abs() < 1e-9);
        assert_eq!(f.residual, 0.0);
        let f = fit_linear(&pts(OpKind::Filter, Device::Accelerator, &[(1000, 8200.0), (10_000, 10_000.0)])).unwrap();
        assert!(rel(f.slope, 0.2) < 1e-12);
        assert!(rel(f.intercept, 8000.0) < 1e-12);
    }

    #[test]
    fn identical_sizes_are_rank_deficient() {
        let m = pts(OpKind::Filter, Device::Cpu, &[(500, 1.0), (500, 2.0)]);
        assert!(matches!(fit_linear(&m), Err(Error::RankDeficient)));
        assert!(matches!(fit_linear(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn noisy_fit_matches_closed_form() {
        let p = CostModel::default();
        let clock = ClockMode::Simulated { sigma: 0.05 };
        let m = run_microbenchmark(OpKind::Filter, &default_sizes(10_000.0), Device::Accelerator, &p, clock, 5, 3)
            .unwrap();
        let f = fit_linear(&m).unwrap();
        let xy: Vec<(f64, f64)> = m.iter().map(|x| (x.n as f64, x.cost)).collect();
        let (a, b) = ols_oracle(&xy);
        assert!(rel(f.slope, a) < 1e-9, "{} vs {a}", f.slope);
        assert!(rel(f.intercept, b) < 1e-9, "{} vs {b}", f.intercept);
    }

    #[test]
    fn analytic_crossover() {
        let cpu = LinearFit {
            slope: 1.0,
            intercept: 0.0,
            residual: 0.0,
            slope_stderr: 0.0,
        };
        let acc = LinearFit {
            slope: 0.2,
            intercept: 8000.0,
            ..cpu
        };
        let BreakEvenOutcome::Found(b) = break_even(OpKind::Filter, &cpu, &acc, &[]) else {
            panic!("expected a crossover");
        };
        assert!(rel(b.n_star_estimated, 10_000.0) < 1e-12);
        assert_eq!(b.n_star_observed, None);
        assert_eq!(break_even(OpKind::Filter, &cpu, &cpu, &[]), BreakEvenOutcome::NoBreakEven);
        let steeper = LinearFit { slope: 1.5, ..acc };
        assert_eq!(break_even(OpKind::Filter, &cpu, &steeper, &[]), BreakEvenOutcome::NoBreakEven);
    }

    #[test]
    fn noise_free_calibration_is_exact() {
        for c in run_calibration(&CostModel::default(), EXACT, 5, 11).unwrap() {
            let BreakEvenOutcome::Found(b) = c.outcome else {
                panic!("default profile has a crossover");
            };
            assert!(rel(b.n_star_estimated, 10_000.0) < 1e-9);
            assert!(b.relative_error.unwrap() <= 1e-9, "{:?}", b);
        }
    }

    #[test]
    fn identical_profiles_never_break_even() {
        let mut p = CostModel::default();
        for op in OpKind::OFFLOADABLE {
            let prim = p.primitive_mut(op).unwrap();
            prim.accelerator.setup = 0.0;
            prim.accelerator.transfer = 0.0;
            prim.accelerator.compute = 1.0;
        }
        for clock in [EXACT, ClockMode::Simulated { sigma: 0.05 }] {
            for c in run_calibration(&p, clock, 5, 2).unwrap() {
                assert_eq!(c.outcome, BreakEvenOutcome::NoBreakEven);
            }
        }
    }

    #[test]
    fn crossover_identity_on_other_profiles() {
        let mut p = CostModel::default();
        p.filter.accelerator.setup = 3000.0;
        p.aggregate.cpu.per_item = 2.5;
        let cals = run_calibration(&p, EXACT, 2, 0).unwrap();
        for c in cals {
            let analytic = p.primitive(c.op_kind).unwrap().break_even().unwrap();
            assert!(rel(c.outcome.n_star().unwrap(), analytic) < 1e-9);
        }
    }

    #[test]
    fn sign_property_on_grid() {
        let p = CostModel::default();
        let n_star = p.filter.break_even().unwrap();
        for n in log_sizes(10.0, 1e6, 100) {
            let n = n as f64;
            let c = cost(OpKind::Filter, Variant::Cpu, Cardinalities::Unary(n), &p).unwrap();
            let a = cost(OpKind::Filter, Variant::Accelerator, Cardinalities::Unary(n), &p).unwrap();
            if n > n_star {
                assert!(a < c, "n={n}");
            } else if n < n_star {
                assert!(a > c, "n={n}");
            }
        }
    }

    #[test]
    fn accelerator_risk_examples() {
        assert_eq!(accelerator_risk(20_000.0, Some(10_000.0)), 0.5);
        assert_eq!(accelerator_risk(5000.0, Some(10_000.0)), 2.0);
        assert_eq!(accelerator_risk(0.0, Some(10_000.0)), 10_000.0);
        assert_eq!(accelerator_risk(5.0, None), f64::MAX);
    }

    #[test]
    fn default_grid_shape() {
        let s = default_sizes(10_000.0);
        assert_eq!(s.len(), 8);
        assert_eq!((s[0], s[7]), (1000, 100_000));
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn interpolation_uses_sign_change() {
        let mut m = pts(OpKind::Filter, Device::Cpu, &[(10, 10.0), (20, 20.0), (30, 30.0)]);
        m.extend(pts(OpKind::Filter, Device::Accelerator, &[(10, 14.0), (20, 22.0), (30, 26.0)]));
        // d = -4, -2, +4: crossover between 20 and 30 at 20 + 10 * 2/6.
        assert!(rel(observed_crossover(&m).unwrap(), 20.0 + 10.0 / 3.0) < 1e-12);
    }

    #[test]
    fn csv_exports() {
        let cals = run_calibration(&CostModel::default(), EXACT, 1, 0).unwrap();
        let mut buf = Vec::new();
        write_measurements_csv(&cals, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("op_kind,device,n,cost\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 2 * 8);
        let mut buf = Vec::new();
        write_fits_csv(&cals, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }

    proptest! {
        #[test]
        fn fit_recovers_exact_lines(a in 0.01f64..10.0, b in 0.0f64..1e4, n0 in 1u64..1000, step in 1u64..500) {
            let xy: Vec<(u64, f64)> = (0..6).map(|i| {
                let n = n0 + i * step;
                (n, a * n as f64 + b)
            }).collect();
            let f = fit_linear(&pts(OpKind::Filter, Device::Cpu, &xy)).unwrap();
            prop_assert!(rel(f.slope, a) < 1e-7);
            prop_assert!((f.intercept - b).abs() < 1e-6 * (1.0 + b + a * (n0 + 5 * step) as f64));
        }
    }
}
