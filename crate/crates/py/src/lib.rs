//! Python bindings. Series cross the boundary as `(shape, values, meta_json)`
//! with `values` flattened location-major, then feature, then time.

use std::path::Path;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use causalcast::anomaly;
use causalcast::diffkit::Tensor2;
use causalcast::error::{Error, TtsError};
use causalcast::inner;
use causalcast::synth::{self, Lorenz96Config, VarConfig};
use causalcast::tensor::TensorSeries;
use causalcast::trainer::{self, Forecaster, RunConfig};

type Series = ((usize, usize, usize), Vec<f64>, String);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) | Error::Tts(TtsError::Io(e)) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(format!("[{}] {other}", other.code())),
    }
}

fn export(ts: &TensorSeries) -> PyResult<Series> {
    let meta = serde_json::to_string(ts.meta()).map_err(|e| to_py(e.into()))?;
    Ok((ts.shape(), ts.values().to_vec(), meta))
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor2> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("expected a square matrix"));
    }
    Ok(Tensor2::from_fn(n, n, |j, i| rows[j][i]))
}

/// Reads a TTS file.
#[pyfunction]
fn read_tts(path: &str) -> PyResult<Series> {
    export(&TensorSeries::load(path).map_err(|e| to_py(e.into()))?)
}

/// Writes `values` with shape `(n, d, t)` to a TTS file with default metadata.
#[pyfunction]
fn write_tts(path: &str, shape: (usize, usize, usize), values: Vec<f64>) -> PyResult<()> {
    let (n, d, t) = shape;
    let ts = TensorSeries::with_default_meta(n, d, t, values).map_err(|e| to_py(e.into()))?;
    ts.save(path).map_err(|e| to_py(e.into()))
}

/// Lorenz-96 trajectory and its 0/1 parent matrix (`truth[j][i]` for `j -> i`).
#[pyfunction]
#[pyo3(signature = (p, t, forcing=10.0, seed=0))]
fn simulate_lorenz96(p: usize, t: usize, forcing: f64, seed: u64) -> PyResult<(Series, Vec<Vec<u8>>)> {
    let (ts, g) = synth::simulate_lorenz96(&Lorenz96Config { p, t, forcing, seed, ..Default::default() }).map_err(to_py)?;
    Ok((export(&ts)?, g.adjacency))
}

/// Stable sparse VAR series and its parent matrix.
#[pyfunction]
#[pyo3(signature = (p, t, lags=2, parents=2, seed=0))]
fn simulate_var(p: usize, t: usize, lags: usize, parents: usize, seed: u64) -> PyResult<(Series, Vec<Vec<u8>>)> {
    let coefs = synth::random_sparse_var(p, lags, parents, 0.9, seed);
    let (ts, g) = synth::simulate_var(&VarConfig::new(coefs, t, 1.0, seed)).map_err(to_py)?;
    Ok((export(&ts)?, g.adjacency))
}

/// Trace-exponential acyclicity residual of a square weighted adjacency.
#[pyfunction]
fn acyclicity(a: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(inner::acyclicity(&matrix(&a)?))
}

/// Mann-Whitney AUC-ROC; `None` when the labels hold a single class.
#[pyfunction]
fn auc_roc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(anomaly::auc_rank(&scores, &labels))
}

/// Runs the pipeline from TOML text; relative paths resolve against `base_dir`.
/// Returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (config_toml, base_dir="."))]
fn run(py: Python<'_>, config_toml: &str, base_dir: &str) -> PyResult<String> {
    let cfg = RunConfig::from_toml(config_toml).map_err(to_py)?;
    let manifest = py.detach(|| trainer::run_from_config(&cfg, Path::new(base_dir))).map_err(to_py)?;
    serde_json::to_string(&manifest).map_err(|e| to_py(e.into()))
}

/// Forecasts past the end of the series in `input` and writes it to `out`.
#[pyfunction]
#[pyo3(signature = (model, input, out, horizon=None))]
fn forecast(model: &str, input: &str, out: &str, horizon: Option<usize>) -> PyResult<()> {
    let f = Forecaster::load(Path::new(model)).map_err(to_py)?;
    let ts = TensorSeries::load(input).map_err(|e| to_py(e.into()))?;
    f.predict(&ts, horizon).map_err(to_py)?.save(out).map_err(|e| to_py(e.into()))
}

#[pymodule]
fn causalcast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(read_tts, m)?)?;
    m.add_function(wrap_pyfunction!(write_tts, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_lorenz96, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_var, m)?)?;
    m.add_function(wrap_pyfunction!(acyclicity, m)?)?;
    m.add_function(wrap_pyfunction!(auc_roc, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(forecast, m)?)?;
    Ok(())
}
