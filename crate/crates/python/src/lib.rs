//! Python bindings: scenario runs, validation and the density metrics.

use std::path::PathBuf;

use contiflow::harness::config::{parse_table, parse_value, resolve_alias, set_path};
use contiflow::harness::{run_scenario, validate_config, write_run, Scenario, ScenarioConfig};
use contiflow::metrics::{l1_error, l2_error, w1_circle};
use contiflow::ring::{DensityField, RingGrid};
use contiflow::transport::ot_map_circle;
use contiflow::Error;
use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(v) => PyValueError::new_err(v.join("\n")),
        Error::Divergence { t, reason } => PyArithmeticError::new_err(format!("diverged at t = {t}: {reason}")),
        Error::InvalidParameter { .. } | Error::GridMismatch(_) | Error::MassMismatch { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn config(text: &str, overrides: Option<Vec<(String, String)>>) -> PyResult<ScenarioConfig> {
    let mut table = parse_table(text).map_err(to_py)?;
    for (k, v) in overrides.unwrap_or_default() {
        set_path(&mut table, resolve_alias(&k), parse_value(&v)).map_err(to_py)?;
    }
    validate_config(ScenarioConfig::from_table(table).map_err(to_py)?).map_err(to_py)
}

/// Scenario names with one-line descriptions.
#[pyfunction]
fn list_scenarios() -> Vec<(String, String)> {
    Scenario::ALL.iter().map(|s| (s.name().to_string(), s.description().to_string())).collect()
}

/// Validates a TOML configuration and returns it fully resolved.
#[pyfunction]
#[pyo3(signature = (config_text, overrides=None))]
fn validate(config_text: &str, overrides: Option<Vec<(String, String)>>) -> PyResult<String> {
    Ok(config(config_text, overrides)?.to_toml())
}

/// Runs a scenario. Returns `{"summary": <json str>, "metrics": {column: [..]}}`
/// and, when `out_dir` is given, also writes the run directory there.
#[pyfunction]
#[pyo3(signature = (config_text, overrides=None, out_dir=None))]
fn run<'py>(
    py: Python<'py>,
    config_text: &str,
    overrides: Option<Vec<(String, String)>>,
    out_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config(config_text, overrides)?;
    let rec = py.detach(|| run_scenario(&cfg)).map_err(to_py)?;
    let out = PyDict::new(py);
    if let Some(dir) = out_dir {
        let path = write_run(&dir, &cfg, &rec).map_err(to_py)?;
        out.set_item("run_dir", path)?;
    }
    out.set_item("summary", serde_json::to_string(&rec.summary).map_err(|e| to_py(e.into()))?)?;
    let m = PyDict::new(py);
    let col = |f: fn(&contiflow::harness::MetricRow) -> Option<f64>| rec.metrics.iter().map(f).collect::<Vec<_>>();
    m.set_item("t", rec.metrics.iter().map(|r| r.t).collect::<Vec<_>>())?;
    m.set_item("l2_error", col(|r| r.l2_error))?;
    m.set_item("l1_error", col(|r| r.l1_error))?;
    m.set_item("w1_error", col(|r| r.w1_error))?;
    m.set_item("mass", col(|r| r.mass))?;
    m.set_item("mass_secondary", col(|r| r.mass_secondary))?;
    m.set_item("lyapunov", col(|r| r.lyapunov))?;
    m.set_item("alpha", col(|r| r.alpha))?;
    m.set_item("fraction_in_goal", col(|r| r.fraction_in_goal))?;
    m.set_item("estimate_error", col(|r| r.estimate_error))?;
    m.set_item("l2_baseline", col(|r| r.l2_baseline))?;
    out.set_item("metrics", m)?;
    Ok(out)
}

fn fields(rho: Vec<f64>, rho_d: Vec<f64>, length: f64) -> PyResult<(DensityField, DensityField)> {
    if rho.len() != rho_d.len() {
        return Err(PyValueError::new_err("densities must have the same number of cells"));
    }
    let g = RingGrid::new(rho.len(), length).map_err(to_py)?;
    Ok((DensityField::new(g, rho).map_err(to_py)?, DensityField::new(g, rho_d).map_err(to_py)?))
}

/// `(L2, L1, W1)` between two cell-averaged densities on a ring of `length`.
#[pyfunction]
#[pyo3(signature = (rho, rho_d, length=std::f64::consts::TAU))]
fn metrics(rho: Vec<f64>, rho_d: Vec<f64>, length: f64) -> PyResult<(f64, f64, f64)> {
    let (a, b) = fields(rho, rho_d, length)?;
    Ok((l2_error(&a, &b).map_err(to_py)?, l1_error(&a, &b).map_err(to_py)?, w1_circle(&a, &b).map_err(to_py)?))
}

/// Displacement `T(x) - x` of the quadratic-cost optimal map on the ring, at cell centres.
#[pyfunction]
#[pyo3(signature = (rho, rho_d, length=std::f64::consts::TAU))]
fn ot_displacement(rho: Vec<f64>, rho_d: Vec<f64>, length: f64) -> PyResult<Vec<f64>> {
    let (a, b) = fields(rho, rho_d, length)?;
    Ok(ot_map_circle(&a, &b).map_err(to_py)?.displacement().into_values())
}

#[pymodule]
fn contiflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(list_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(ot_displacement, m)?)?;
    m.add("SCHEMA_VERSION", contiflow::harness::SCHEMA_VERSION)?;
    Ok(())
}
