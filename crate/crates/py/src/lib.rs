//! Python bindings. Structured results cross the boundary as JSON and are
//! decoded with the `json` module, so callers receive plain dicts and lists.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use latebind_core::accel::{fit_linear as core_fit, Device, Measurement};
use latebind_core::bench::{self, report::summary_table, LatencyReport, ScenarioConfig, ScenarioKind};
use latebind_core::engine::{self, ClockMode, EngineConfig, ExecutionMode};
use latebind_core::planner::{plan, OpKind};
use latebind_core::policy::{Policy, Thresholds};
use latebind_core::rng::derive;
use latebind_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Validation(_) | Error::Empty(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn clock(sigma: f64) -> ClockMode {
    ClockMode::Simulated { sigma }
}

fn parse_mode(name: &str) -> PyResult<ExecutionMode> {
    ExecutionMode::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown mode `{name}`")))
}

/// Offload thresholds, as produced by `calibrate` or loaded from JSON.
#[pyclass(module = "latebind", name = "Thresholds", from_py_object)]
#[derive(Clone)]
struct PyThresholds {
    inner: Thresholds,
}

#[pymethods]
impl PyThresholds {
    /// Uncalibrated defaults.
    #[new]
    fn new() -> Self {
        PyThresholds { inner: Thresholds::default() }
    }

    /// Every gate disabled: orchestrated execution degenerates to baseline.
    #[staticmethod]
    fn inert() -> Self {
        PyThresholds { inner: Thresholds::inert() }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: Thresholds = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(py_err)?;
        Ok(PyThresholds { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("Thresholds({})", serde_json::to_string(&self.inner).unwrap_or_default())
    }
}

/// Microbenchmarks both devices and derives offload thresholds.
/// Returns `(thresholds, report)` where `report` is a list of per-kind rows.
#[pyfunction]
#[pyo3(signature = (reps = 5, seed = 1, sigma = 0.05))]
fn calibrate(py: Python<'_>, reps: usize, seed: u64, sigma: f64) -> PyResult<(PyThresholds, Py<PyAny>)> {
    let (policy, report) = bench::calibrated_policy(
        &EngineConfig::default().device,
        clock(sigma),
        reps,
        seed,
        &Thresholds::default(),
    )
    .map_err(py_err)?;
    Ok((PyThresholds { inner: policy.thresholds }, to_py(py, &report)?))
}

/// One benchmark scenario with a fixed seed and workload.
#[pyclass(module = "latebind", name = "Scenario")]
struct PyScenario {
    inner: bench::Scenario,
    engine: EngineConfig,
}

#[pymethods]
impl PyScenario {
    #[new]
    #[pyo3(signature = (kind, queries = 200, seed = 1, modes = None))]
    fn new(kind: &str, queries: usize, seed: u64, modes: Option<Vec<String>>) -> PyResult<Self> {
        let kind = ScenarioKind::parse(kind).map_err(py_err)?;
        let mut config = ScenarioConfig {
            queries,
            seed,
            ..ScenarioConfig::default()
        };
        if let Some(m) = modes {
            config.modes = m.iter().map(|s| parse_mode(s)).collect::<PyResult<_>>()?;
        }
        let inner = bench::Scenario::new(kind, config).map_err(py_err)?;
        Ok(PyScenario {
            inner,
            engine: EngineConfig::default(),
        })
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    #[getter]
    fn queries(&self) -> usize {
        self.inner.config.queries
    }

    /// Annotated plan of one query, as the planner sees it.
    fn explain(&self, query: usize) -> PyResult<String> {
        let inst = self.inner.instance(query).map_err(py_err)?;
        let p = plan(&inst.query, &inst.stats, &self.inner.planner_model).map_err(py_err)?;
        Ok(p.explain())
    }

    /// Executes one query in one mode; returns `(value, trace)`.
    #[pyo3(signature = (query, mode, thresholds = None, sigma = 0.05))]
    fn execute(
        &self,
        py: Python<'_>,
        query: usize,
        mode: &str,
        thresholds: Option<PyThresholds>,
        sigma: f64,
    ) -> PyResult<(i64, Py<PyAny>)> {
        let inst = self.inner.instance(query).map_err(py_err)?;
        let p = plan(&inst.query, &inst.stats, &self.inner.planner_model).map_err(py_err)?;
        let policy = self.policy(thresholds, sigma)?;
        let seed = derive(self.inner.config.seed, query as u64);
        let (result, trace) = engine::execute(&p, &inst.tables, parse_mode(mode)?, &policy, &self.engine, clock(sigma), seed)
            .map_err(py_err)?;
        Ok((result.value, to_py(py, &trace)?))
    }

    /// Runs every query under every configured mode and returns the latency
    /// report. Thresholds are calibrated when not given.
    #[pyo3(signature = (thresholds = None, sigma = 0.05))]
    fn run(&self, py: Python<'_>, thresholds: Option<PyThresholds>, sigma: f64) -> PyResult<PyReport> {
        let policy = self.policy(thresholds, sigma)?;
        let inner = py
            .detach(|| bench::run_scenario(&self.inner, &self.engine, &policy, clock(sigma)))
            .map_err(py_err)?;
        Ok(PyReport { inner })
    }
}

impl PyScenario {
    fn policy(&self, thresholds: Option<PyThresholds>, sigma: f64) -> PyResult<Policy> {
        match thresholds {
            Some(t) => Ok(Policy {
                thresholds: t.inner,
                ..Policy::default()
            }),
            None => bench::calibrated_policy(&self.engine.device, clock(sigma), 5, self.inner.config.seed, &Thresholds::default())
                .map(|(p, _)| p)
                .map_err(py_err),
        }
    }
}

/// Latency distributions of one scenario run.
#[pyclass(module = "latebind", name = "Report")]
struct PyReport {
    inner: LatencyReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn modes(&self) -> Vec<&'static str> {
        self.inner.modes.iter().map(|m| m.mode.name()).collect()
    }

    /// Latency per query id; `None` marks a failed query.
    fn latencies(&self, mode: &str) -> PyResult<Vec<Option<f64>>> {
        Ok(self.mode(mode)?.latencies.clone())
    }

    fn percentiles(&self, py: Python<'_>, mode: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &self.mode(mode)?.percentiles)
    }

    fn switches(&self, mode: &str) -> PyResult<usize> {
        Ok(self.mode(mode)?.switches)
    }

    fn summary(&self) -> String {
        summary_table(&self.inner)
    }

    /// Writes samples.csv, cdf.csv and summary files under `out`.
    fn emit(&self, out: &str) -> PyResult<Vec<String>> {
        let files = bench::report_emit(&self.inner, std::path::Path::new(out)).map_err(py_err)?;
        Ok(files.iter().map(|p| p.display().to_string()).collect())
    }
}

impl PyReport {
    fn mode(&self, mode: &str) -> PyResult<&bench::ModeReport> {
        let m = parse_mode(mode)?;
        self.inner
            .mode(m)
            .ok_or_else(|| PyValueError::new_err(format!("mode `{mode}` was not run")))
    }
}

/// Nearest-rank percentile; `samples` need not be sorted.
#[pyfunction]
fn percentile(mut samples: Vec<f64>, p: f64) -> PyResult<f64> {
    samples.sort_by(f64::total_cmp);
    bench::percentile(&samples, p).map_err(py_err)
}

/// Least-squares line through `(n, cost)`; returns `(slope, intercept)`.
#[pyfunction]
fn fit_linear(ns: Vec<u64>, costs: Vec<f64>) -> PyResult<(f64, f64)> {
    if ns.len() != costs.len() {
        return Err(PyValueError::new_err("ns and costs differ in length"));
    }
    let m: Vec<Measurement> = ns
        .into_iter()
        .zip(costs)
        .map(|(n, cost)| Measurement {
            op_kind: OpKind::Filter,
            device: Device::Cpu,
            n,
            cost,
        })
        .collect();
    let f = core_fit(&m).map_err(py_err)?;
    Ok((f.slope, f.intercept))
}

#[pyfunction]
fn scenarios() -> Vec<&'static str> {
    ScenarioKind::ALL.iter().map(|k| k.name()).collect()
}

#[pyfunction]
fn modes() -> Vec<&'static str> {
    ExecutionMode::ALL.iter().map(|m| m.name()).collect()
}

#[pymodule]
fn latebind(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyThresholds>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(percentile, m)?)?;
    m.add_function(wrap_pyfunction!(fit_linear, m)?)?;
    m.add_function(wrap_pyfunction!(scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(modes, m)?)?;
    Ok(())
}
