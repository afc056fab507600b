//! Python module `pyfermikms`.
//!
//! Matrices cross the boundary as lists of rows of Python complex numbers.

use std::path::Path;

use fermikms::cli::{run, Experiment, ScenarioConfig};
use fermikms::dynamics::compute_k;
use fermikms::entropy::{self, BoundStateDatum};
use fermikms::estimates;
use fermikms::kms::{t_series, KmsSpec};
use fermikms::linop::{fermi_factor, CMat, Covariance, HermitianOperator, Sign};
use fermikms::model::{self, PotentialProfile};
use fermikms::ness;
use fermikms::Error;
use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Rows = Vec<Vec<Complex64>>;

fn err(e: Error) -> PyErr {
    match e {
        Error::Hypothesis(_) | Error::Inconsistent(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_mat(rows: &Rows) -> PyResult<CMat> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    Ok(CMat::from_fn(n, n, |i, j| rows[i][j]))
}

fn to_op(rows: &Rows) -> PyResult<HermitianOperator> {
    HermitianOperator::new(to_mat(rows)?).map_err(err)
}

fn from_mat(m: &CMat) -> Rows {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

#[pyclass(name = "LatticeModel", from_py_object)]
#[derive(Clone)]
struct PyLatticeModel {
    inner: model::LatticeModel,
}

#[pymethods]
impl PyLatticeModel {
    #[new]
    #[pyo3(signature = (spatial_dim, n_modes_per_axis, box_length, mass, mu = 0.0))]
    fn new(spatial_dim: usize, n_modes_per_axis: usize, box_length: f64, mass: f64, mu: f64) -> PyResult<Self> {
        let inner = model::LatticeModel::new(spatial_dim, n_modes_per_axis, box_length, mass, mu).map_err(err)?;
        Ok(PyLatticeModel { inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn mass(&self) -> f64 {
        self.inner.mass
    }

    fn dirac(&self) -> PyResult<Rows> {
        Ok(from_mat(model::build_dirac(&self.inner).map_err(err)?.matrix()))
    }

    fn potential(&self, profile: &PyProfile) -> PyResult<Rows> {
        Ok(from_mat(model::build_potential(&self.inner, &profile.inner).map_err(err)?.matrix()))
    }

    fn __repr__(&self) -> String {
        let m = &self.inner;
        format!(
            "LatticeModel(spatial_dim={}, n_modes_per_axis={}, box_length={}, mass={})",
            m.spatial_dim, m.n_modes_per_axis, m.box_length, m.mass
        )
    }
}

#[pyclass(name = "Profile", from_py_object)]
#[derive(Clone)]
struct PyProfile {
    inner: PotentialProfile,
}

#[pymethods]
impl PyProfile {
    #[staticmethod]
    fn electric_bump(amplitude: f64, radius: f64, epsilon: f64) -> Self {
        PyProfile {
            inner: PotentialProfile::electric_bump(amplitude, radius, epsilon),
        }
    }

    #[staticmethod]
    fn zero(epsilon: f64) -> Self {
        PyProfile {
            inner: PotentialProfile::zero(epsilon),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyProfile { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("profile serializes")
    }

    fn with_t_adiabatic(&self, t: f64) -> Self {
        PyProfile {
            inner: self.inner.clone().with_t_adiabatic(t),
        }
    }

    fn scaled(&self, lam: f64) -> Self {
        PyProfile {
            inner: self.inner.scaled(lam),
        }
    }
}

/// (1 + e^{−βH})⁻¹
#[pyfunction]
fn fermi(h: Rows, beta: f64) -> PyResult<Rows> {
    Ok(from_mat(fermi_factor(&to_op(&h)?, beta, Sign::Minus).map_err(err)?.matrix()))
}

/// 𝒦 and integrator diagnostics for a lattice model and profile.
#[pyfunction]
#[pyo3(signature = (model, profile, step = None))]
fn compute_k_py<'py>(py: Python<'py>, model: &PyLatticeModel, profile: &PyProfile, step: Option<f64>) -> PyResult<Bound<'py, PyDict>> {
    let (_, rep) = compute_k(&model.inner, &profile.inner, step).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("k", from_mat(rep.k.matrix()))?;
    d.set_item("disagreement", rep.disagreement)?;
    d.set_item("error_estimate", rep.error_estimate)?;
    d.set_item("unitarity_defect", rep.unitarity_defect)?;
    d.set_item("step", rep.step)?;
    Ok(d)
}

/// KMS series for F₋(D+K): (value, truncation_bound, quadrature_estimate).
#[pyfunction]
#[pyo3(signature = (d, k, beta, order = 5, quad_points = 12))]
fn kms_series(d: Rows, k: Rows, beta: f64, order: usize, quad_points: usize) -> PyResult<(Rows, f64, f64)> {
    let spec = KmsSpec::new(beta, to_op(&d)?, to_op(&k)?).map_err(err)?;
    let r = t_series(&spec, beta, order, quad_points).map_err(err)?;
    Ok((from_mat(r.value.matrix()), r.truncation_bound, r.quadrature_estimate))
}

/// Relative entropy of the perturbed state by four routes.
#[pyfunction]
#[pyo3(signature = (d, k, beta, order = 5, quad_points = 12, u_quad = 32))]
fn relative_entropy<'py>(
    py: Python<'py>,
    d: Rows,
    k: Rows,
    beta: f64,
    order: usize,
    quad_points: usize,
    u_quad: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = KmsSpec::new(beta, to_op(&d)?, to_op(&k)?).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("closed", entropy::rel_entropy_closed(&spec).map_err(err)?)?;
    out.set_item("integral", entropy::rel_entropy_integral(&spec, u_quad).map_err(err)?)?;
    let a = Covariance::fermi(&spec.d, beta).map_err(err)?;
    let b = Covariance::fermi(&spec.d.add(&spec.k), beta).map_err(err)?;
    out.set_item("kl", entropy::rel_entropy_kl(&a, &b).map_err(err)?)?;
    if spec.contraction < 1.0 {
        let s = entropy::rel_entropy_series(&spec, order, quad_points).map_err(err)?;
        out.set_item("series", s.value)?;
        out.set_item("series_bound", s.truncation_bound)?;
    }
    Ok(out)
}

#[pyfunction]
fn eulerian(n: usize) -> PyResult<Vec<u64>> {
    entropy::eulerian(n).map_err(err)
}

/// Σ_j of the closed per-mode entropy for (s_j, k_j) pairs.
#[pyfunction]
fn ness_rel_entropy(beta: f64, modes: Vec<(f64, f64)>) -> PyResult<f64> {
    let data: Vec<BoundStateDatum> = modes.iter().map(|&(s, k)| BoundStateDatum::from_shift(s, k, beta)).collect();
    entropy::ness_rel_entropy_closed(beta, &data).map_err(err)
}

/// Eigenvalues of D+K inside the mass gap.
#[pyfunction]
#[pyo3(signature = (d, k, mass, edge_margin = 1e-3))]
fn gap_states(d: Rows, k: Rows, mass: f64, edge_margin: f64) -> PyResult<Vec<f64>> {
    let g = ness::bound_states(&to_op(&d)?, &to_op(&k)?, mass, edge_margin).map_err(err)?;
    Ok(g.states.iter().map(|s| s.s).collect())
}

/// ‖P𝒦Q‖_HS over T with the fitted exponent and R².
#[pyfunction]
fn adiabatic_sweep(model: &PyLatticeModel, profile: &PyProfile, t_list: Vec<f64>, step: f64) -> PyResult<(Vec<f64>, f64, f64)> {
    let s = estimates::adiabatic_sweep(&model.inner, &profile.inner, &t_list, step).map_err(err)?;
    Ok((s.hs_norms, s.fitted_exponent, s.r_squared))
}

/// Bound checks for one profile as (name, lhs, rhs, passes) tuples.
#[pyfunction]
#[pyo3(signature = (model, profile, step, seed = 0))]
fn bound_checks(model: &PyLatticeModel, profile: &PyProfile, step: f64, seed: u64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let m = &model.inner;
    let p = &profile.inner;
    let (d, rep) = estimates::k_for(m, p, step).map_err(err)?;
    let kb = estimates::kernel_bound_h(m, p, rep.k.matrix(), seed).map_err(err)?;
    let checks = [
        estimates::hs_bound_u(m, p, step, seed).map_err(err)?,
        estimates::hs_bound_k(m, p, &d, rep.k.matrix(), seed).map_err(err)?,
        kb.l1_check,
        kb.l2_check,
    ];
    let mut out: Vec<(String, f64, f64, bool)> = checks.iter().map(|c| (c.name.clone(), c.lhs, c.rhs, c.passes())).collect();
    out.push(("kernel_domination".into(), kb.worst_excess, 1e-8, kb.pointwise_ok));
    Ok(out)
}

/// Runs a scenario config (JSON text) and returns report.json as text.
#[pyfunction]
#[pyo3(signature = (config, out_dir, experiment = None, seed = None))]
fn run_scenario(config: &str, out_dir: &str, experiment: Option<&str>, seed: Option<u64>) -> PyResult<String> {
    let cfg = ScenarioConfig::from_json(config).map_err(err)?;
    let only = experiment.map(Experiment::parse).transpose().map_err(err)?;
    let rep = run(&cfg, Path::new(out_dir), only, seed).map_err(err)?;
    serde_json::to_string_pretty(&rep).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn pyfermikms(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLatticeModel>()?;
    m.add_class::<PyProfile>()?;
    m.add_function(wrap_pyfunction!(fermi, m)?)?;
    m.add("compute_k", wrap_pyfunction!(compute_k_py, m)?)?;
    m.add_function(wrap_pyfunction!(kms_series, m)?)?;
    m.add_function(wrap_pyfunction!(relative_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(eulerian, m)?)?;
    m.add_function(wrap_pyfunction!(ness_rel_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(gap_states, m)?)?;
    m.add_function(wrap_pyfunction!(adiabatic_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(bound_checks, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
