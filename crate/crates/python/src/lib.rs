use ndarray::{Array1, Array2, Array3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sista::bench::{self, GammaSearchConfig, SolverKind};
use sista::inference::{self, BootstrapConfig};
use sista::ot::{self, CostParams, ObservedPlan, Potentials, SupportMode};
use sista::preprocess;
use sista::solvers::{self, InitialPoint, SolverConfig};

fn to_py(e: sista::Error) -> PyErr {
    if e.is_data_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn stack(mats: Vec<Vec<Vec<f64>>>) -> PyResult<Array3<f64>> {
    let mats = mats.into_iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
    ot::DissimilarityBasis::stack(&mats).map_err(to_py)
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn config(tol: f64, max_iter: usize) -> SolverConfig {
    SolverConfig {
        tol_kkt: tol,
        max_iter,
        ..SolverConfig::default()
    }
}

/// Penalized dual problem with a centered basis.
#[pyclass(frozen)]
struct Problem {
    inner: sista::Problem,
}

impl Problem {
    fn point(&self, u: Vec<f64>, v: Vec<f64>, beta: Vec<f64>) -> PyResult<(Potentials, CostParams)> {
        let pot = Potentials::new(Array1::from(u), Array1::from(v));
        let beta = CostParams::new(Array1::from(beta));
        if pot.u.len() != self.inner.n() || pot.v.len() != self.inner.n() || beta.len() != self.inner.k() {
            return Err(PyValueError::new_err(format!(
                "expected u, v of length {} and beta of length {}",
                self.inner.n(),
                self.inner.k()
            )));
        }
        Ok((pot, beta))
    }
}

#[pymethods]
impl Problem {
    /// `plan` is N x N, `basis` a list of K raw N x N matrices (centered here).
    #[new]
    #[pyo3(signature = (plan, basis, gamma=0.0, full_support=false))]
    fn new(plan: Vec<Vec<f64>>, basis: Vec<Vec<Vec<f64>>>, gamma: f64, full_support: bool) -> PyResult<Self> {
        let mode = if full_support {
            SupportMode::Full
        } else {
            SupportMode::Structural
        };
        let plan = ObservedPlan::with_mode(matrix(plan)?, mode).map_err(to_py)?;
        let inner = preprocess::build_problem(plan, stack(basis)?, gamma, 1.0).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    fn with_gamma(&self, gamma: f64) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_gamma(gamma).map_err(to_py)?,
        })
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    /// Normalized observed plan.
    fn observed(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.plan().entries().to_owned())
    }

    fn objective(&self, u: Vec<f64>, v: Vec<f64>, beta: Vec<f64>) -> PyResult<f64> {
        let (pot, beta) = self.point(u, v, beta)?;
        ot::dual_objective(&pot, &beta, &self.inner).map_err(to_py)
    }

    fn penalized_objective(&self, u: Vec<f64>, v: Vec<f64>, beta: Vec<f64>) -> PyResult<f64> {
        let (pot, beta) = self.point(u, v, beta)?;
        ot::penalized_objective(&pot, &beta, &self.inner).map_err(to_py)
    }

    fn grad_beta(&self, u: Vec<f64>, v: Vec<f64>, beta: Vec<f64>) -> PyResult<Vec<f64>> {
        let (pot, beta) = self.point(u, v, beta)?;
        Ok(ot::grad_beta(&pot, &beta, &self.inner).map_err(to_py)?.to_vec())
    }

    fn grad_uv(&self, u: Vec<f64>, v: Vec<f64>, beta: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let (pot, beta) = self.point(u, v, beta)?;
        let (gu, gv) = ot::grad_uv(&pot, &beta, &self.inner).map_err(to_py)?;
        Ok((gu.to_vec(), gv.to_vec()))
    }

    fn plan(&self, u: Vec<f64>, v: Vec<f64>, beta: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let (pot, beta) = self.point(u, v, beta)?;
        Ok(rows(&ot::plan(&pot, &beta, &self.inner).map_err(to_py)?))
    }

    fn kkt_residual(&self, u: Vec<f64>, v: Vec<f64>, beta: Vec<f64>) -> PyResult<f64> {
        let (pot, beta) = self.point(u, v, beta)?;
        solvers::kkt_residual(&pot, &beta, &self.inner).map_err(to_py)
    }

    /// Sinkhorn potentials at fixed `beta`: returns `(u, v, iterations)`.
    #[pyo3(signature = (beta, tol=1e-12, max_iter=100_000))]
    fn sinkhorn(&self, beta: Vec<f64>, tol: f64, max_iter: usize) -> PyResult<(Vec<f64>, Vec<f64>, usize)> {
        let beta = CostParams::new(Array1::from(beta));
        let out = ot::sinkhorn_solve(&beta, &self.inner, tol, max_iter).map_err(to_py)?;
        Ok((out.potentials.u.to_vec(), out.potentials.v.to_vec(), out.iterations))
    }

    fn __repr__(&self) -> String {
        format!("Problem(K={}, N={}, gamma={})", self.inner.k(), self.inner.n(), self.inner.gamma())
    }
}

#[pyclass(frozen, get_all)]
struct Solution {
    solver: String,
    beta: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    phi: f64,
    kkt_residual: f64,
    converged: bool,
    iterations: usize,
    /// Trace rows as `(t, elapsed, phi, kkt, nnz)`.
    trace: Vec<(usize, f64, f64, f64, usize)>,
}

impl From<sista::Solution> for Solution {
    fn from(s: sista::Solution) -> Self {
        let trace = s
            .trace
            .records()
            .iter()
            .map(|r| (r.t, r.elapsed, r.phi, r.kkt, r.nnz))
            .collect();
        Self {
            solver: s.solver.to_string(),
            beta: s.beta.beta.to_vec(),
            u: s.potentials.u.to_vec(),
            v: s.potentials.v.to_vec(),
            phi: s.phi,
            kkt_residual: s.kkt_residual,
            converged: s.converged,
            iterations: s.iterations,
            trace,
        }
    }
}

#[pymethods]
impl Solution {
    #[getter]
    fn nnz(&self) -> usize {
        self.beta.iter().filter(|b| **b != 0.0).count()
    }

    fn __repr__(&self) -> String {
        format!(
            "Solution(solver={}, phi={:.10e}, kkt={:.2e}, nnz={}, iterations={})",
            self.solver,
            self.phi,
            self.kkt_residual,
            self.nnz(),
            self.iterations
        )
    }
}

/// Synthetic problem with standard normal basis and log-normal plan.
#[pyfunction]
#[pyo3(signature = (k, n, seed=0, gamma=0.0))]
fn simulate(k: usize, n: usize, seed: u64, gamma: f64) -> PyResult<Problem> {
    let bundle = bench::gen_synthetic_bundle(k, n, seed).map_err(to_py)?;
    let inner = bundle.to_problem(Some(gamma), None).map_err(to_py)?;
    Ok(Problem { inner })
}

/// Fits from zero with `solver` in {"sista", "ista", "cd"}.
#[pyfunction]
#[pyo3(signature = (problem, solver="sista", tol=1e-8, max_iter=100_000))]
fn solve(py: Python<'_>, problem: &Problem, solver: &str, tol: f64, max_iter: usize) -> PyResult<Solution> {
    let kind: SolverKind = solver.parse().map_err(to_py)?;
    let cfg = config(tol, max_iter);
    let p = &problem.inner;
    let sol = py
        .detach(|| kind.solve(p, &cfg, &InitialPoint::zeros(p)))
        .map_err(to_py)?;
    Ok(sol.into())
}

#[pyfunction]
fn soft_threshold(z: Vec<f64>, tau: f64) -> Vec<f64> {
    solvers::prox_l1(Array1::from(z).view(), tau).to_vec()
}

#[pyfunction]
fn gamma_max(problem: &Problem) -> PyResult<f64> {
    bench::gamma_max(&problem.inner).map_err(to_py)
}

/// Penalty whose fit has `round(target * K)` nonzeros: `(gamma, solution, exact)`.
#[pyfunction]
#[pyo3(signature = (problem, target, tol=1e-10))]
fn find_gamma_for_sparsity(py: Python<'_>, problem: &Problem, target: f64, tol: f64) -> PyResult<(f64, Solution, bool)> {
    let search = GammaSearchConfig {
        solver: config(tol, 100_000),
        ..GammaSearchConfig::default()
    };
    let p = &problem.inner;
    let out = py
        .detach(|| bench::find_gamma_for_sparsity(p, target, &search))
        .map_err(to_py)?;
    Ok((out.gamma, out.solution.into(), out.exact))
}

/// Bootstrap standard errors at fixed `gamma`; `sample_size=None` refits the
/// observed plan unchanged.
#[pyfunction]
#[pyo3(signature = (problem, gamma, replicates=1000, sample_size=Some(inference::DEFAULT_SAMPLE_SIZE), seed=0))]
fn bootstrap_se(
    py: Python<'_>,
    problem: &Problem,
    gamma: f64,
    replicates: usize,
    sample_size: Option<u64>,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let cfg = BootstrapConfig {
        replicates,
        sample_size,
        seed,
        ..BootstrapConfig::default()
    };
    let p = &problem.inner;
    let out = py
        .detach(|| inference::bootstrap_se(p, gamma, &cfg))
        .map_err(to_py)?;
    Ok(out.se.to_vec())
}

#[pymodule]
fn pysista(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Problem>()?;
    m.add_class::<Solution>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(soft_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(gamma_max, m)?)?;
    m.add_function(wrap_pyfunction!(find_gamma_for_sparsity, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_se, m)?)?;
    Ok(())
}
