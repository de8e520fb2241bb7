//! Python bindings for `adaloc`.
//!
//! Arrays cross the boundary as nested lists of floats; matrices are row-major.

use adaloc::adaptive::{self, CycleResult};
use adaloc::config::ExperimentConfig;
use adaloc::forest::{Forest, ForestConfig};
use adaloc::localization::{self, LocalizationSpec, Radii, Taper};
use adaloc::lorenz96::Lorenz96;
use adaloc::metrics::{self, BetaParams, RankHistogram};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: adaloc::Error) -> PyErr {
    if e.is_config_error() || matches!(e, adaloc::Error::Dimension { .. }) {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n_cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n_cols) {
        return Err(PyValueError::new_err("ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), n_cols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn parse_taper(name: &str) -> PyResult<Taper> {
    match name {
        "gaspari_cohn" | "gc" => Ok(Taper::GaspariCohn),
        "gaussian" => Ok(Taper::Gaussian),
        other => Err(PyValueError::new_err(format!("unknown taper {other:?}"))),
    }
}

fn parse_config(toml: &str) -> PyResult<ExperimentConfig> {
    let cfg = ExperimentConfig::from_toml_str(toml).map_err(to_py)?;
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

fn results_to_py<'py>(py: Python<'py>, results: &[CycleResult]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    results
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("cycle", r.cycle)?;
            d.set_item("phase", r.phase.as_str())?;
            let scalar = match r.radius_used {
                Radii::Scalar(v) => Some(v),
                Radii::PerVariable(_) => None,
            };
            d.set_item("radius", scalar)?;
            d.set_item("radius_mean", r.radius_used.summary().0)?;
            d.set_item("forecast_rmse_true", r.forecast_rmse_true)?;
            d.set_item("forecast_rmse_obs", r.forecast_rmse_obs)?;
            d.set_item("analysis_rmse_true", r.analysis_rmse_true)?;
            d.set_item("analysis_rmse_obs", r.analysis_rmse_obs)?;
            d.set_item("analysis_kl", r.analysis_kl)?;
            d.set_item("criterion", r.criterion_value)?;
            Ok(d)
        })
        .collect()
}

/// Gaspari-Cohn taper at distance `z` with half-width `c`.
#[pyfunction]
fn gc_taper(z: f64, c: f64) -> PyResult<f64> {
    localization::gc_taper(z, c).map_err(to_py)
}

#[pyfunction]
fn gaussian_taper(z: f64, length: f64) -> PyResult<f64> {
    localization::gaussian_taper(z, length).map_err(to_py)
}

/// Localization matrix on a ring of `k` points. `radius` is a float or a list of `k` floats.
#[pyfunction]
#[pyo3(signature = (radius, k, taper = "gaspari_cohn"))]
fn build_rho(radius: &Bound<'_, PyAny>, k: usize, taper: &str) -> PyResult<Vec<Vec<f64>>> {
    let radii = match radius.extract::<f64>() {
        Ok(r) => Radii::Scalar(r),
        Err(_) => Radii::PerVariable(radius.extract::<Vec<f64>>()?),
    };
    let spec = LocalizationSpec::new(parse_taper(taper)?, radii);
    localization::build_rho(&spec, k).map(|m| rows(&m)).map_err(to_py)
}

#[pyfunction]
fn kl_beta_uniform(alpha: f64, beta: f64) -> PyResult<f64> {
    let p = BetaParams::new(alpha, beta).map_err(to_py)?;
    metrics::kl_beta_uniform(p).map_err(to_py)
}

/// Method-of-moments Beta fit to rank counts; returns `(alpha, beta)`.
#[pyfunction]
fn fit_beta(counts: Vec<u64>) -> PyResult<(f64, f64)> {
    let hist = RankHistogram {
        n_samples: counts.iter().sum(),
        counts,
    };
    let p = metrics::fit_beta(&hist).map_err(to_py)?;
    Ok((p.alpha, p.beta))
}

#[pyfunction]
fn rmse(x: Vec<f64>, x_true: Vec<f64>) -> PyResult<f64> {
    metrics::rmse(&DVector::from_vec(x), &DVector::from_vec(x_true)).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (x, forcing = 8.0))]
fn l96_tendency(x: Vec<f64>, forcing: f64) -> PyResult<Vec<f64>> {
    let model = Lorenz96::new(x.len(), forcing, 0.005).map_err(to_py)?;
    let dx = model.tendency(&DVector::from_vec(x)).map_err(to_py)?;
    Ok(dx.as_slice().to_vec())
}

#[pyfunction]
#[pyo3(signature = (x, n_steps, forcing = 8.0, dt = 0.005))]
fn l96_integrate(x: Vec<f64>, n_steps: usize, forcing: f64, dt: f64) -> PyResult<Vec<f64>> {
    let model = Lorenz96::new(x.len(), forcing, dt).map_err(to_py)?;
    let out = model.integrate(&DVector::from_vec(x), n_steps).map_err(to_py)?;
    Ok(out.as_slice().to_vec())
}

/// Random forest regressor with multi-output targets.
#[pyclass(name = "Forest", module = "pyadaloc")]
struct PyForest {
    inner: Forest,
}

#[pymethods]
impl PyForest {
    #[staticmethod]
    #[pyo3(signature = (x, y, n_trees = 100, max_depth = None, min_samples_leaf = 2, n_features_per_split = None, seed = 0))]
    fn fit(
        x: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        n_trees: usize,
        max_depth: Option<usize>,
        min_samples_leaf: usize,
        n_features_per_split: Option<usize>,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = ForestConfig {
            n_trees,
            max_depth,
            min_samples_leaf,
            n_features_per_split,
            rng_seed: seed,
        };
        let inner = Forest::fit(&matrix(&x)?, &matrix(&y)?, &cfg).map_err(to_py)?;
        Ok(PyForest { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Forest::from_json(text).map(|inner| PyForest { inner }).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        self.inner.predict_rows(&matrix(&x)?).map(|m| rows(&m)).map_err(to_py)
    }

    #[getter]
    fn feature_importances(&self) -> Vec<f64> {
        self.inner.feature_importances().to_vec()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features
    }
}

/// Fixed-radius twin experiment; `config` is a TOML document (empty for defaults).
#[pyfunction]
#[pyo3(signature = (config = "", radius = None))]
fn run_fixed<'py>(py: Python<'py>, config: &str, radius: Option<f64>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = parse_config(config)?;
    let r = Radii::Scalar(radius.unwrap_or(cfg.localization.fixed_radius));
    let results = py.detach(|| adaptive::run_fixed_radius(&cfg, &r)).map_err(to_py)?;
    results_to_py(py, &results)
}

/// Adaptive twin experiment; returns `(cycles, forest)`.
#[pyfunction]
#[pyo3(signature = (config = ""))]
fn run_adaptive<'py>(py: Python<'py>, config: &str) -> PyResult<(Vec<Bound<'py, PyDict>>, PyForest)> {
    let cfg = parse_config(config)?;
    let run = py.detach(|| adaptive::run_experiment(&cfg)).map_err(to_py)?;
    Ok((results_to_py(py, &run.results)?, PyForest { inner: run.forest }))
}

#[pymodule]
fn pyadaloc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(gc_taper, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_taper, m)?)?;
    m.add_function(wrap_pyfunction!(build_rho, m)?)?;
    m.add_function(wrap_pyfunction!(kl_beta_uniform, m)?)?;
    m.add_function(wrap_pyfunction!(fit_beta, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(l96_tendency, m)?)?;
    m.add_function(wrap_pyfunction!(l96_integrate, m)?)?;
    m.add_function(wrap_pyfunction!(run_fixed, m)?)?;
    m.add_function(wrap_pyfunction!(run_adaptive, m)?)?;
    m.add_class::<PyForest>()?;
    Ok(())
}
