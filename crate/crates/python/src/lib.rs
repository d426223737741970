//! Python bindings.
//!
//! Matrices cross the boundary as lists of rows; chain and report objects are
//! returned as JSON-compatible dictionaries or small wrapper classes.

use std::path::PathBuf;

use mstm::data::TransformKind;
use mstm::pipeline::{self, FitOptions, RunConfig};
use mstm::predict::{trace_summary, ParameterSelector};
use mstm::sampler::PosteriorChain;
use mstm::Error;
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingInput(_) => PyFileNotFoundError::new_err(e.to_string()),
        Error::Io { .. } | Error::Chain(_) | Error::NonFiniteState { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("matrix rows must have equal length"));
    }
    Ok(DMatrix::from_row_iterator(n, m, rows.into_iter().flatten()))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vector(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// MI basis: the `rank` leading eigenvectors of `(I - P_X) A (I - P_X)`.
/// Returns `(S, eigenvalues)`.
#[pyfunction]
fn mi_basis(x: Vec<Vec<f64>>, adjacency: Vec<Vec<f64>>, rank: usize) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let (s, values) = mstm::basis::mi_basis(&matrix(x)?, &matrix(adjacency)?, rank).map_err(to_py)?;
    Ok((rows(&s), vector(&values)))
}

/// MI propagator `M_t` for basis `S_t` and covariates `X_t`.
#[pyfunction]
fn mi_propagator(s: Vec<Vec<f64>>, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(
        &mstm::basis::mi_propagator(&matrix(s)?, &matrix(x)?).map_err(to_py)?,
    ))
}

/// `K* = {A⁺(S'PS)}⁻¹`, regularized by `epsilon` when singular.
#[pyfunction]
#[pyo3(signature = (s, target, epsilon = mstm::prior::DEFAULT_EPSILON))]
fn kstar(s: Vec<Vec<f64>>, target: Vec<Vec<f64>>, epsilon: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(
        &mstm::prior::kstar(&matrix(s)?, &matrix(target)?, epsilon)
            .map_err(to_py)?
            .matrix,
    ))
}

/// `W*_t = A⁺(K_t - M K_{t-1} M')`.
#[pyfunction]
fn wstar(k_t: Vec<Vec<f64>>, k_prev: Vec<Vec<f64>>, m: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(
        &mstm::prior::wstar(&matrix(k_t)?, &matrix(k_prev)?, &matrix(m)?)
            .map_err(to_py)?
            .matrix,
    ))
}

/// Frobenius-nearest positive semidefinite matrix.
#[pyfunction]
fn best_positive_approximant(r: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&mstm::prior::best_positive_approximant(&matrix(r)?)))
}

/// Transforms a raw estimate (`identity`, `logit` or `log`) and its variance.
#[pyfunction]
fn apply_transform(value: f64, variance: f64, kind: &str) -> PyResult<(f64, f64)> {
    let kind: TransformKind = kind.parse().map_err(to_py)?;
    mstm::data::apply_transform(value, variance, kind).map_err(to_py)
}

/// Stored draws of one chain.
#[pyclass(frozen)]
struct Chain {
    inner: PosteriorChain,
}

#[pymethods]
impl Chain {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed()
    }

    #[getter]
    fn iterations(&self) -> Vec<usize> {
        self.inner.draw_iterations.clone()
    }

    /// `σ_K²` per draw.
    fn sigma_k2(&self) -> Vec<f64> {
        self.inner.draws.iter().map(|d| d.sigma_k2).collect()
    }

    /// `β_t` per draw for 1-based `t`.
    fn beta(&self, t: usize) -> PyResult<Vec<Vec<f64>>> {
        self.block(t, |d| &d.beta)
    }

    /// `η_t` per draw for 1-based `t`.
    fn eta(&self, t: usize) -> PyResult<Vec<Vec<f64>>> {
        self.block(t, |d| &d.eta)
    }

    /// Mean, sd, 95% interval and lag-1 autocorrelation per parameter.
    #[pyo3(signature = (selector = "all"))]
    fn summary<'py>(&self, py: Python<'py>, selector: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let selector: ParameterSelector = selector.parse().map_err(to_py)?;
        trace_summary(&self.inner, &selector)
            .map_err(to_py)?
            .into_iter()
            .map(|s| {
                let d = PyDict::new(py);
                d.set_item("name", s.name)?;
                d.set_item("mean", s.mean)?;
                d.set_item("sd", s.sd)?;
                d.set_item("lower", s.lower)?;
                d.set_item("upper", s.upper)?;
                d.set_item("lag1_autocorrelation", s.lag1_autocorrelation)?;
                d.set_item("draws", s.draws)?;
                Ok(d)
            })
            .collect()
    }
}

impl Chain {
    fn block(&self, t: usize, field: fn(&mstm::sampler::ModelState) -> &Vec<DVector<f64>>) -> PyResult<Vec<Vec<f64>>> {
        if t == 0 || t > self.inner.layout.horizon {
            return Err(PyValueError::new_err(format!(
                "time {t} outside 1..={}",
                self.inner.layout.horizon
            )));
        }
        Ok(self.inner.draws.iter().map(|d| vector(&field(d)[t - 1])).collect())
    }
}

/// A run configuration file and the commands that act on it.
#[pyclass(frozen)]
struct Run {
    config: RunConfig,
}

#[pymethods]
impl Run {
    #[new]
    fn new(config: PathBuf) -> PyResult<Self> {
        Ok(Self {
            config: RunConfig::from_file(&config).map_err(to_py)?,
        })
    }

    /// Validation report as a JSON string.
    fn validate(&self) -> PyResult<String> {
        let report = pipeline::validate(&self.config).map_err(to_py)?;
        serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Simulates data from the `[truth]` section; returns the observation file path.
    #[pyo3(signature = (output, seed = None))]
    fn simulate(&self, output: PathBuf, seed: Option<u64>) -> PyResult<String> {
        let out = pipeline::simulate_to_dir(&self.config, seed, &output).map_err(to_py)?;
        Ok(out.observations.display().to_string())
    }

    /// Fits the model; returns the chain directories.
    #[pyo3(signature = (seed = None, chains = 1, output = None, survey = None))]
    fn fit(
        &self,
        py: Python<'_>,
        seed: Option<u64>,
        chains: usize,
        output: Option<PathBuf>,
        survey: Option<usize>,
    ) -> PyResult<Vec<String>> {
        let opts = FitOptions {
            seed,
            chains,
            output,
            survey,
        };
        let config = &self.config;
        let result = py.detach(|| pipeline::fit(config, &opts)).map_err(to_py)?;
        Ok(result.into_iter().map(|(d, _)| d.display().to_string()).collect())
    }

    /// Loads a chain directory.
    fn load_chain(&self, dir: PathBuf) -> PyResult<Chain> {
        let graph = pipeline::load_inputs(&self.config).map_err(to_py)?.graph;
        let (inner, _) = mstm::store::read_chain(&dir, &graph).map_err(to_py)?;
        Ok(Chain { inner })
    }

    /// Posterior means and MSPE at every prediction location.
    #[pyo3(signature = (chain_dir, seed = None))]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        chain_dir: PathBuf,
        seed: Option<u64>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let graph = pipeline::load_inputs(&self.config).map_err(to_py)?.graph;
        let surface = pipeline::predict(&self.config, &chain_dir, seed).map_err(to_py)?;
        surface
            .entries
            .iter()
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("variable", e.location.variable)?;
                d.set_item("time", e.time)?;
                d.set_item("unit", graph.unit_name(e.location.unit))?;
                d.set_item("yhat", e.yhat)?;
                d.set_item("mspe", e.mspe)?;
                d.set_item("yhat_backtransformed", e.yhat_backtransformed)?;
                d.set_item("mspe_backtransformed", e.mspe_backtransformed)?;
                Ok(d)
            })
            .collect()
    }
}

#[pymodule]
fn mstm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(mi_basis, m)?)?;
    m.add_function(wrap_pyfunction!(mi_propagator, m)?)?;
    m.add_function(wrap_pyfunction!(kstar, m)?)?;
    m.add_function(wrap_pyfunction!(wstar, m)?)?;
    m.add_function(wrap_pyfunction!(best_positive_approximant, m)?)?;
    m.add_function(wrap_pyfunction!(apply_transform, m)?)?;
    m.add_class::<Chain>()?;
    m.add_class::<Run>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
