//! Python bindings: the four commands plus the metric functions.
//!
//! Documents come back as Python objects decoded from the same JSON the
//! command line prints. Failures raise `dil.DilError` whose message starts
//! with the `error[kind]:` prefix used by the command line.

use std::path::PathBuf;

use dil_core::cli::{self, AuditArgs, EvalArgs, GenerateArgs, Precision, ProtocolArgs};
use dil_core::metrics;
use dil_core::DilError as CoreError;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(dil, DilError, PyException);

fn raise(err: CoreError) -> PyErr {
    DilError::new_err(cli::error_line(&err))
}

fn to_py<'py, S: Serialize>(py: Python<'py>, value: &S) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| DilError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn precision(name: &str) -> PyResult<Precision> {
    match name {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(DilError::new_err(format!(
            "error[argument]: precision must be 'f32' or 'f64', got '{other}'"
        ))),
    }
}

/// Writes synthetic domains, their manifests and a protocol file to `out`.
#[pyfunction]
#[pyo3(signature = (out, config=None, seed=None))]
fn generate(out: PathBuf, config: Option<PathBuf>, seed: Option<u64>) -> PyResult<()> {
    cli::cmd_generate(&GenerateArgs { config, out, seed }).map_err(raise)
}

/// Runs a protocol, writes its artifacts under `out` and returns the report.
#[pyfunction]
#[pyo3(signature = (config, data, out, strategy=None, seed=None, epochs=None, precision="f32"))]
#[allow(clippy::too_many_arguments)]
fn run_protocol<'py>(
    py: Python<'py>,
    config: PathBuf,
    data: PathBuf,
    out: PathBuf,
    strategy: Option<String>,
    seed: Option<u64>,
    epochs: Option<usize>,
    precision: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let args = ProtocolArgs {
        config,
        data,
        out,
        seed,
        strategy,
        epochs,
        precision: self::precision(precision)?,
    };
    let report = match args.precision {
        Precision::F32 => cli::cmd_protocol::<f32>(&args),
        Precision::F64 => cli::cmd_protocol::<f64>(&args),
    }
    .map_err(raise)?;
    to_py(py, &report)
}

/// Scores a checkpoint on a manifest through one bank (`domain_id`) or by
/// entropy-based bank selection (`agnostic=True`).
#[pyfunction]
#[pyo3(signature = (checkpoint, data, domain_id=None, agnostic=false, normalize_entropy=false, batch_size=64, precision="f32"))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    data: PathBuf,
    domain_id: Option<usize>,
    agnostic: bool,
    normalize_entropy: bool,
    batch_size: usize,
    precision: &str,
) -> PyResult<Bound<'py, PyAny>> {
    if domain_id.is_some() == agnostic {
        return Err(DilError::new_err(
            "error[argument]: pass exactly one of domain_id and agnostic=True",
        ));
    }
    let args = EvalArgs {
        checkpoint,
        data,
        domain_id,
        agnostic,
        normalize_entropy,
        batch_size,
        precision: self::precision(precision)?,
        out: None,
    };
    let doc = match args.precision {
        Precision::F32 => cli::cmd_eval::<f32>(&args),
        Precision::F64 => cli::cmd_eval::<f64>(&args),
    }
    .map_err(raise)?;
    to_py(py, &doc)
}

/// Shared and per-domain parameter counts of a checkpoint.
#[pyfunction]
fn audit(py: Python<'_>, checkpoint: PathBuf) -> PyResult<Bound<'_, PyAny>> {
    let args = AuditArgs {
        checkpoint: Some(checkpoint),
        cnn14: false,
        classes: 10,
    };
    to_py(py, &cli::cmd_audit(&args).map_err(raise)?)
}

/// Mean drop on earlier domains at step `t` (1-based) of a score matrix.
#[pyfunction]
fn forgetting(rows: Vec<Vec<f64>>, t: usize) -> PyResult<f64> {
    metrics::forgetting(&rows, t).map_err(raise)
}

/// Label-weighted label-ranking average precision of row-major scores.
#[pyfunction]
fn lwlrap(scores: Vec<f64>, labels: Vec<bool>, n_classes: usize) -> PyResult<f64> {
    metrics::lwlrap(&scores, &labels, n_classes).map_err(raise)
}

#[pymodule]
fn dil(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DilError", m.py().get_type::<DilError>())?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(run_protocol, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    m.add_function(wrap_pyfunction!(forgetting, m)?)?;
    m.add_function(wrap_pyfunction!(lwlrap, m)?)?;
    Ok(())
}
