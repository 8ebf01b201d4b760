//! Python bindings: the command line, the evaluation metrics, matrix
//! balancing and the information-gap bound.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mixhic::error::Error;
use mixhic::evaluation::{self, DiscreteJoint, InfoGapReport};
use mixhic::preprocessing::{kr_balance, DenseMatrix};

fn to_py(e: Error) -> PyErr {
    if e.is_user_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Runs `mixhic <args...>` in-process and returns its exit code.
#[pyfunction]
fn run(args: Vec<String>) -> i32 {
    mixhic::cli::run(std::iter::once("mixhic".to_string()).chain(args))
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// Area under the ROC curve with tied scores averaged.
#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    evaluation::auroc(&scores, &labels).map_err(to_py)
}

/// Coefficient of determination of `pred` against `target`.
#[pyfunction]
fn r_squared(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    evaluation::r_squared(&pred, &target).map_err(to_py)
}

/// Knight-Ruiz balancing of a square non-negative matrix; returns the
/// balanced rows and the per-bin scaling.
#[pyfunction]
#[pyo3(signature = (rows, tolerance = 1e-8, max_iterations = 3000))]
fn balance(rows: Vec<Vec<f64>>, tolerance: f64, max_iterations: usize) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let m = DenseMatrix::from_rows(&rows).map_err(to_py)?;
    let b = kr_balance(&m, tolerance, max_iterations).map_err(to_py)?;
    let n = b.matrix.n();
    let out = (0..n).map(|i| (0..n).map(|j| b.matrix.get(i, j)).collect()).collect();
    Ok((out, b.scaling))
}

fn report_dict<'py>(py: Python<'py>, r: &InfoGapReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mi_z1", r.mi_z1)?;
    d.set_item("mi_z2", r.mi_z2)?;
    d.set_item("mi_joint", r.mi_joint)?;
    d.set_item("gamma", r.gamma)?;
    d.set_item("raw_ce", r.raw_ce)?;
    d.set_item("aligned_ce", r.aligned_ce)?;
    d.set_item("bound_holds", r.bound_holds)?;
    Ok(d)
}

/// Information-gap report of a joint table over `(z1, z2, t)`, given
/// row-major with `t` fastest.
#[pyfunction]
fn info_gap<'py>(py: Python<'py>, z1: usize, z2: usize, t: usize, p: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let joint = DiscreteJoint::new(z1, z2, t, p).map_err(to_py)?;
    report_dict(py, &evaluation::info_gap_demo(&joint))
}

/// Seeded random joints with their reports.
#[pyfunction]
#[pyo3(signature = (trials = 100, seed = 0, max_alphabet = 4))]
fn theorem_trials<'py>(py: Python<'py>, trials: usize, seed: u64, max_alphabet: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
    evaluation::theorem_trials(trials, seed, max_alphabet)
        .map_err(to_py)?
        .iter()
        .map(|t| {
            let d = report_dict(py, &t.report)?;
            d.set_item("trial", t.trial)?;
            d.set_item("alphabets", t.alphabets)?;
            d.set_item("chain_rule_error", t.chain_rule_error)?;
            d.set_item("data_processing_holds", t.data_processing_holds)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn mixhic_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(r_squared, m)?)?;
    m.add_function(wrap_pyfunction!(balance, m)?)?;
    m.add_function(wrap_pyfunction!(info_gap, m)?)?;
    m.add_function(wrap_pyfunction!(theorem_trials, m)?)?;
    Ok(())
}
