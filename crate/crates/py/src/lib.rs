use std::sync::Arc;

use fdx_core::experiments::{self, Pipeline, RunConfig};
use fdx_core::grid::Field;
use fdx_core::semiflow::{solve_relative_error, time_t_map, TrajectoryRecord};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(fdx, FdxError, PyValueError);

fn err(e: fdx_core::FdxError) -> PyErr {
    FdxError::new_err(e.to_string())
}

/// Hands a serializable value to Python through `json.loads`.
fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| FdxError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

#[derive(Serialize)]
struct Trajectory<'a> {
    t: &'a [f64],
    norm_p1: &'a [f64],
    norm_inf: &'a [f64],
    sup_v_grad: &'a [f64],
    trunc_active: &'a [bool],
}

fn trajectory(rec: &TrajectoryRecord) -> Trajectory<'_> {
    Trajectory {
        t: &rec.times,
        norm_p1: &rec.norm_p1,
        norm_inf: &rec.norm_inf,
        sup_v_grad: &rec.sup_v_grad,
        trunc_active: &rec.trunc_active,
    }
}

/// Grid, Lane–Emden profile, operator spectrum and gap parameters for one
/// configuration.
#[pyclass(name = "Pipeline", module = "fdx")]
struct PyPipeline {
    inner: Pipeline,
}

impl PyPipeline {
    fn field(&self, values: Vec<f64>) -> PyResult<Field> {
        Field::new(self.inner.grid.clone(), values).map_err(err)
    }
}

#[pymethods]
impl PyPipeline {
    /// Builds from a TOML string; the defaults apply to omitted keys.
    #[new]
    #[pyo3(signature = (config = None, seed = None))]
    fn new(config: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = match config {
            Some(text) => RunConfig::from_toml(text).map_err(err)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.run.seed = s;
        }
        Ok(Self {
            inner: Pipeline::build(&cfg).map_err(err)?,
        })
    }

    fn config(&self) -> PyResult<String> {
        self.inner.config.to_toml().map_err(err)
    }

    fn x(&self) -> Vec<f64> {
        self.inner.grid.x().to_vec()
    }

    fn v(&self) -> Vec<f64> {
        self.inner.state.v().values().to_vec()
    }

    fn stationary(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.state.summary())
    }

    fn lambdas(&self) -> Vec<f64> {
        self.inner.decomp.lambdas().to_vec()
    }

    /// φ_k on the grid, 1-based.
    fn eigenfield(&self, k: usize) -> PyResult<Vec<f64>> {
        if k == 0 || k > self.inner.decomp.k_max() {
            return Err(FdxError::new_err(format!("mode {k} out of range")));
        }
        Ok(self.inner.decomp.phi(k).to_vec())
    }

    /// Gap parameters at cut `k` (the configured cut by default).
    #[pyo3(signature = (k = None))]
    fn gap(&self, py: Python<'_>, k: Option<usize>) -> PyResult<Py<PyAny>> {
        let g = self
            .inner
            .gap_at(k.unwrap_or(self.inner.config.spectrum.cut))
            .map_err(err)?;
        to_py(py, &g)
    }

    /// ∂_t h + Lh = M(h) (or M^ε when truncated) from `h0`.
    #[pyo3(signature = (h0, horizon, truncated = false))]
    fn evolve(&self, py: Python<'_>, h0: Vec<f64>, horizon: f64, truncated: bool) -> PyResult<Py<PyAny>> {
        let h0 = self.field(h0)?;
        let opts = self.inner.config.evolve_options();
        let rec = py
            .detach(|| solve_relative_error(&h0, &self.inner.decomp, horizon, truncated, &opts))
            .map_err(err)?;
        to_py(py, &trajectory(&rec))
    }

    /// S^ε_t(h).
    #[pyo3(signature = (h, t = 1.0))]
    fn time_map(&self, py: Python<'_>, h: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
        let h = self.field(h)?;
        let cfg = self.inner.config.truncation_config();
        let decomp = Arc::clone(&self.inner.decomp);
        let out = py.detach(|| time_t_map(&h, t, &cfg, &decomp)).map_err(err)?;
        Ok(out.into_values())
    }

    /// θ(h_c) for center coordinates at the configured cut.
    fn theta(&self, py: Python<'_>, coords: Vec<f64>) -> PyResult<Vec<f64>> {
        let mut ms = self
            .inner
            .manifold_solver(self.inner.config.spectrum.cut)
            .map_err(err)?;
        let th = py.detach(|| ms.theta(&coords)).map_err(err)?;
        Ok(th.into_values())
    }

    fn shadow(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let seed = self.inner.config.run.seed;
        let rep = py
            .detach(|| experiments::run_shadow_report(&self.inner, seed))
            .map_err(err)?;
        to_py(py, &rep)
    }

    /// One acceptance criterion by number.
    fn criterion(&self, py: Python<'_>, id: u8) -> PyResult<Py<PyAny>> {
        let rep = py.detach(|| experiments::run_criterion(id, &self.inner));
        to_py(py, &rep)
    }
}

#[pyfunction]
fn default_config() -> PyResult<String> {
    RunConfig::default().to_toml().map_err(err)
}

#[pyfunction]
fn criteria() -> Vec<(u8, &'static str)> {
    experiments::CRITERIA.to_vec()
}

#[pymodule]
fn fdx(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(criteria, m)?)?;
    m.add("FdxError", m.py().get_type::<FdxError>())?;
    m.add("SCHEMA_VERSION", fdx_core::SCHEMA_VERSION)?;
    Ok(())
}
