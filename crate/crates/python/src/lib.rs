//! Python bindings. Configurations and reports cross the boundary as JSON strings, in
//! the same format the command-line tool reads and writes.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use concatmc::cli::{execute, Command};
use concatmc::config::ExperimentConfig;
use concatmc::estimate::{Model, ModelGenerator};
use concatmc::functions::FunctionSpec;
use concatmc::oracle::{exact_resolvent, exact_semigroup};

fn err(e: concatmc::Error) -> PyErr {
    if e.is_configuration() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn parse(config_json: &str) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_json(config_json).map_err(err)
}

/// Validates a configuration and returns it with every default filled in.
#[pyfunction]
fn resolve_config(config_json: &str) -> PyResult<String> {
    serde_json::to_string(&parse(config_json)?).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Runs a command (`resolvent`, `check-pasting`, ...) and returns the JSON report:
/// `{"command", "pass", "config", "rows", "details"}`.
#[pyfunction]
#[pyo3(signature = (command, config_json, samples=None, seed=None))]
fn run(py: Python<'_>, command: &str, config_json: &str, samples: Option<usize>, seed: Option<u64>) -> PyResult<String> {
    let cmd = Command::from_name(command).ok_or_else(|| PyValueError::new_err(format!("unknown command {command:?}")))?;
    let mut cfg = parse(config_json)?;
    if let Some(n) = samples {
        cfg.params.samples = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = py.detach(|| execute(cmd, &cfg)).map_err(err)?;
    let report = serde_json::json!({
        "command": cmd.name(),
        "pass": out.pass(),
        "config": cfg,
        "rows": out.rows,
        "details": out.details,
    });
    Ok(report.to_string())
}

/// Exact `U_α f` (or `T_t f` when `time` is given) at a start of a finite-chain
/// configuration. `function_json` is a function description such as
/// `{"kind": "indicator", "point": "a"}`.
#[pyfunction]
#[pyo3(signature = (config_json, stage, point, function_json, alpha=1.0, time=None))]
fn oracle_value(
    config_json: &str,
    stage: usize,
    point: &str,
    function_json: &str,
    alpha: f64,
    time: Option<f64>,
) -> PyResult<f64> {
    let cfg = parse(config_json)?;
    let f: FunctionSpec = serde_json::from_str(function_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let plan = cfg.build_plan().map_err(err)?;
    let mut model = Model::new(&plan, stage, point).map_err(err)?;
    model.project = cfg.is_pasting();
    let gen = ModelGenerator::new(&model).map_err(err)?;
    let fv = gen.vector(&f);
    let values = match time {
        Some(t) => exact_semigroup(gen.sub_generator(), t, &fv),
        None => exact_resolvent(gen.sub_generator(), alpha, &fv),
    }
    .map_err(err)?;
    gen.index(&model.start)
        .map(|i| values[i])
        .ok_or_else(|| PyValueError::new_err(format!("({stage},{point}) is not a state")))
}

#[pymodule]
fn concatmc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_value, m)?)?;
    Ok(())
}
