//! Python bindings over `firl_core`: gridworld construction, the soft
//! solver, exact divergences and gradients, the kNN KL estimator, and
//! config-driven runs.

use std::path::PathBuf;
use std::str::FromStr;

use firl_core::divergence::h_f;
use firl_core::grad::analytic_grad_exact;
use firl_core::gradcheck::run_gradcheck;
use firl_core::io::{gradcheck_csv, RunConfig};
use firl_core::kl_eval::knn_kl;
use firl_core::runner::{run_scenario, Overrides};
use firl_core::{
    build_gridworld, divergence_exact, solve, ExpertDensity, FDivKind, FiniteMdp, RewardModel,
    SolverConfig,
};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_kind(kind: &str) -> PyResult<FDivKind> {
    FDivKind::from_str(kind).map_err(value_err)
}

/// Expert table for `kind`; RKL accepts unnormalized weights.
fn expert_density(kind: FDivKind, weights: Vec<f64>) -> PyResult<ExpertDensity> {
    match kind {
        FDivKind::Rkl => ExpertDensity::unnormalized(weights),
        _ => ExpertDensity::from_weights(weights),
    }
    .map_err(value_err)
}

/// A finite-horizon tabular MDP.
#[pyclass(name = "Mdp", frozen)]
struct PyMdp {
    inner: FiniteMdp,
}

#[pymethods]
impl PyMdp {
    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn init_dist(&self) -> Vec<f64> {
        self.inner.init_dist().to_vec()
    }

    /// Row `P(· | s, a)`.
    fn next_dist(&self, state: usize, action: usize) -> PyResult<Vec<f64>> {
        if state >= self.inner.n_states() || action >= self.inner.n_actions() {
            return Err(PyValueError::new_err("state or action out of range"));
        }
        Ok(self.inner.next_dist(state, action).to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Mdp(n_states={}, n_actions={}, horizon={})",
            self.inner.n_states(),
            self.inner.n_actions(),
            self.inner.horizon()
        )
    }
}

/// Grid with actions Stay, Up, Down, Left, Right (0..5); `start` is `(x, y)`.
#[pyfunction]
#[pyo3(signature = (width, height, start, horizon, slip = 0.0))]
fn gridworld(
    width: usize,
    height: usize,
    start: (usize, usize),
    horizon: usize,
    slip: f64,
) -> PyResult<PyMdp> {
    if start.0 >= width || start.1 >= height {
        return Err(PyValueError::new_err("start cell outside the grid"));
    }
    let inner = build_gridworld(width, height, slip, start.1 * width + start.0, horizon)
        .map_err(value_err)?;
    Ok(PyMdp { inner })
}

/// Soft-optimal policy and marginals for a state reward.
#[pyfunction]
#[pyo3(signature = (mdp, reward, alpha = 1.0))]
fn solve_soft<'py>(
    py: Python<'py>,
    mdp: &PyMdp,
    reward: Vec<f64>,
    alpha: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = SolverConfig::new(alpha).map_err(value_err)?;
    let sol = solve(&mdp.inner, &reward, &cfg).map_err(value_err)?;
    let out = PyDict::new(py);
    out.set_item("policy", sol.policy)?;
    out.set_item("soft_v", sol.soft_v)?;
    out.set_item("marginals", sol.marginals_t)?;
    out.set_item("marginal_avg", sol.marginal_avg)?;
    Ok(out)
}

/// `D_f(expert ‖ agent)` for `kind` in {"fkl", "rkl", "js"}.
#[pyfunction]
fn divergence(kind: &str, expert: Vec<f64>, agent: Vec<f64>) -> PyResult<f64> {
    let kind = parse_kind(kind)?;
    divergence_exact(kind, &expert_density(kind, expert)?, &agent).map_err(value_err)
}

/// The per-state score `h_f(u)` at density ratio `u`.
#[pyfunction]
fn score(kind: &str, ratio: f64) -> PyResult<f64> {
    h_f(parse_kind(kind)?, ratio).map_err(value_err)
}

/// Exact gradient of the divergence with respect to a tabular reward.
#[pyfunction]
#[pyo3(signature = (mdp, reward, expert, kind = "fkl", alpha = 1.0))]
fn exact_gradient(
    mdp: &PyMdp,
    reward: Vec<f64>,
    expert: Vec<f64>,
    kind: &str,
    alpha: f64,
) -> PyResult<Vec<f64>> {
    let kind = parse_kind(kind)?;
    let model = RewardModel::tabular_from(reward).map_err(value_err)?;
    let cfg = SolverConfig::new(alpha).map_err(value_err)?;
    let report = analytic_grad_exact(
        &mdp.inner,
        &model,
        &cfg,
        kind,
        &expert_density(kind, expert)?,
    )
    .map_err(value_err)?;
    Ok(report.grad)
}

/// kNN estimate of `KL(P ‖ Q)` from 2-D samples.
#[pyfunction]
#[pyo3(signature = (samples_p, samples_q, k = 3))]
fn knn_kl_estimate(samples_p: Vec<[f64; 2]>, samples_q: Vec<[f64; 2]>, k: usize) -> PyResult<f64> {
    Ok(knn_kl(&samples_p, &samples_q, k).map_err(value_err)?.value)
}

/// Finite-difference gradient check; returns the CSV report.
#[pyfunction]
#[pyo3(signature = (seed = 0, instances = 20))]
fn gradcheck(seed: u64, instances: usize) -> PyResult<String> {
    Ok(gradcheck_csv(
        &run_gradcheck(seed, instances).map_err(value_err)?,
    ))
}

/// Runs a scenario config and returns its report as JSON text.
#[pyfunction]
#[pyo3(signature = (config, out = None, seed = None))]
fn run_config(
    py: Python<'_>,
    config: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> PyResult<String> {
    let mut cfg = RunConfig::load(&config).map_err(value_err)?;
    Overrides {
        seed,
        ..Overrides::default()
    }
    .apply(&mut cfg)
    .map_err(value_err)?;
    let output = py
        .detach(|| run_scenario(&cfg, out.as_deref()))
        .map_err(value_err)?;
    let report = serde_json::json!({
        "dir": output.dir,
        "report": output.report,
    });
    Ok(report.to_string())
}

#[pymodule]
fn firl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMdp>()?;
    m.add_function(wrap_pyfunction!(gridworld, m)?)?;
    m.add_function(wrap_pyfunction!(solve_soft, m)?)?;
    m.add_function(wrap_pyfunction!(divergence, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(exact_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(knn_kl_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
