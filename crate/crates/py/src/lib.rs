//! Python bindings: planted instances, the solvers, transfer SGD, the
//! experiment harness and power-law fitting.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lrmt::harness::{self, ExperimentConfig, ExperimentRecord, Family};
use lrmt::losses::{self, Objective};
use lrmt::numerics::{procrustes_distance as procrustes, Matrix};
use lrmt::solvers::{self as core_solvers, HyperOverrides, IterRecord, NoiseSchedule, SolveOptions, SpectrumStats};
use lrmt::synthdata;
use lrmt::transfer::{self as core_transfer, Checkpoints, LogBase, RiskOracle};
use lrmt::{Error, SeededRng};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        Error::Diverged { iteration, .. } => PyRuntimeError::new_err(format!("diverged at iteration {iteration}")),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix must have at least one row"));
    }
    Matrix::from_rows(&rows).map_err(to_py)
}

#[pyclass(name = "GroundTruth", frozen)]
struct PyGroundTruth {
    inner: synthdata::GroundTruth,
}

#[pymethods]
impl PyGroundTruth {
    /// Planted `B*·W*` with singular values `spectrum` (linear in
    /// `[sigma_k, kappa·sigma_k]` when omitted).
    #[new]
    #[pyo3(signature = (d, k, t, noise_sigma, seed, spectrum=None, kappa=2.0, sigma_k=1.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        d: usize,
        k: usize,
        t: usize,
        noise_sigma: f64,
        seed: u64,
        spectrum: Option<Vec<f64>>,
        kappa: f64,
        sigma_k: f64,
    ) -> PyResult<Self> {
        let spectrum = spectrum.unwrap_or_else(|| synthdata::linear_spectrum(k, kappa, sigma_k));
        let inner = synthdata::make_ground_truth(d, k, t, &spectrum, noise_sigma, &mut SeededRng::new(seed, 0))
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }
    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }
    #[getter]
    fn t(&self) -> usize {
        self.inner.t_count
    }
    #[getter]
    fn noise_sigma(&self) -> f64 {
        self.inner.noise_sigma
    }
    #[getter]
    fn b_star(&self) -> Vec<Vec<f64>> {
        self.inner.b_star.to_rows()
    }
    #[getter]
    fn w_star(&self) -> Vec<Vec<f64>> {
        self.inner.w_star.to_rows()
    }
    #[getter]
    fn sigma_star(&self) -> Vec<f64> {
        self.inner.sigma_star.clone()
    }

    fn product(&self) -> Vec<Vec<f64>> {
        self.inner.product().to_rows()
    }

    /// Per-task data with `n` samples each.
    fn sample(&self, n: usize, seed: u64) -> PyResult<PyDataset> {
        let inner = synthdata::sample_tasks(&self.inner, n, &mut SeededRng::new(seed, 1)).map_err(to_py)?;
        Ok(PyDataset { inner })
    }
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: synthdata::MultiTaskDataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn d(&self) -> usize {
        self.inner.dim()
    }
    #[getter]
    fn t(&self) -> usize {
        self.inner.t_count()
    }
    #[getter]
    fn n(&self) -> usize {
        self.inner.n_per_task
    }
    #[getter]
    fn noise_sigma(&self) -> f64 {
        self.inner.noise_sigma
    }

    /// `(X, y)` of task `index`; `X` is d × N with samples as columns.
    fn task(&self, index: usize) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let task = self
            .inner
            .tasks
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("task {index} out of range")))?;
        Ok((task.x.to_rows(), task.y.clone()))
    }

    /// Writes the binary container.
    fn save(&self, path: &str, k: usize) -> PyResult<()> {
        let file = std::fs::File::create(path).map_err(|e| to_py(e.into()))?;
        synthdata::write_dataset(std::io::BufWriter::new(file), &self.inner, k).map_err(to_py)
    }

    /// Reads a binary container; returns `(dataset, k)`.
    #[staticmethod]
    fn load(path: &str) -> PyResult<(Self, usize)> {
        let file = std::fs::File::open(path).map_err(|e| to_py(e.into()))?;
        let f = synthdata::read_dataset(std::io::BufReader::new(file)).map_err(to_py)?;
        Ok((Self { inner: f.data }, f.k))
    }
}

#[pyclass(name = "Factors", frozen)]
struct PyFactors {
    inner: losses::FactorPair,
}

#[pymethods]
impl PyFactors {
    #[new]
    fn new(b: Vec<Vec<f64>>, w: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = losses::FactorPair::new(matrix(b)?, matrix(w)?).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Random start `B = α̃·N(0,1/d)`, `W = (α̃/3)·N(0,1/d)`.
    #[staticmethod]
    fn random(d: usize, k: usize, t: usize, alpha_tilde: f64, seed: u64) -> PyResult<Self> {
        let inner = core_solvers::init_factors(d, k, t, alpha_tilde, &mut SeededRng::new(seed, 2)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn b(&self) -> Vec<Vec<f64>> {
        self.inner.b.to_rows()
    }
    #[getter]
    fn w(&self) -> Vec<Vec<f64>> {
        self.inner.w.to_rows()
    }

    fn product(&self) -> Vec<Vec<f64>> {
        self.inner.product().to_rows()
    }

    /// `‖BᵀB − WWᵀ‖_F`
    fn balance_gap(&self) -> f64 {
        self.inner.balance_gap()
    }

    /// Value of `objective` ("phase1", "phase2" or "tripuraneni") on `data`.
    fn loss(&self, data: &PyDataset, objective: &str) -> PyResult<f64> {
        losses::objective_value(parse_objective(objective)?, &self.inner, &data.inner).map_err(to_py)
    }

    /// Gradient `(∂B, ∂W)` of `objective` on `data`.
    fn grad(&self, data: &PyDataset, objective: &str) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let g = losses::objective_grad(parse_objective(objective)?, &self.inner, &data.inner).map_err(to_py)?;
        Ok((g.gb.to_rows(), g.gw.to_rows()))
    }

    fn estimation_error(&self, gt: &PyGroundTruth) -> PyResult<f64> {
        core_solvers::estimation_error(&self.inner, &gt.inner).map_err(to_py)
    }

    fn dist_to_target(&self, gt: &PyGroundTruth) -> PyResult<f64> {
        core_solvers::dist_to_target(&self.inner, &gt.inner).map_err(to_py)
    }
}

fn parse_objective(name: &str) -> PyResult<Objective> {
    match name {
        "phase1" => Ok(Objective::DataFit),
        "phase2" => Ok(Objective::Balanced),
        "tripuraneni" => Ok(Objective::Tripuraneni),
        other => Err(PyValueError::new_err(format!("unknown objective '{other}'"))),
    }
}

#[pyclass(name = "HyperParams", frozen)]
struct PyHyperParams {
    inner: core_solvers::HyperParams,
}

#[pymethods]
impl PyHyperParams {
    /// Schedule from the spectrum of `gt`; keyword arguments override it.
    #[staticmethod]
    #[pyo3(signature = (gt, failure_prob=0.1, alpha_tilde=None, eta1=None, eta2=None, k1=None, c_k=None, eta1_cap=None))]
    #[allow(clippy::too_many_arguments)]
    fn theoretical(
        gt: &PyGroundTruth,
        failure_prob: f64,
        alpha_tilde: Option<f64>,
        eta1: Option<f64>,
        eta2: Option<f64>,
        k1: Option<usize>,
        c_k: Option<f64>,
        eta1_cap: Option<f64>,
    ) -> PyResult<Self> {
        let overrides = HyperOverrides { alpha_tilde, eta1, eta2, k1, c_k, eta1_cap, ..Default::default() };
        let inner = core_solvers::theoretical_hyperparams(&SpectrumStats::from_truth(&gt.inner), failure_prob, &overrides)
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn alpha_tilde(&self) -> f64 {
        self.inner.alpha_tilde
    }
    #[getter]
    fn eta1(&self) -> f64 {
        self.inner.eta1
    }
    #[getter]
    fn eta2(&self) -> f64 {
        self.inner.eta2
    }
    #[getter]
    fn k1(&self) -> usize {
        self.inner.k1
    }

    fn __repr__(&self) -> String {
        let h = &self.inner;
        format!("HyperParams(alpha_tilde={}, eta1={}, eta2={}, k1={})", h.alpha_tilde, h.eta1, h.eta2, h.k1)
    }
}

#[pyclass(name = "SolveResult", frozen)]
struct PySolveResult {
    inner: core_solvers::SolveResult,
}

fn iter_dict<'py>(py: Python<'py>, r: &IterRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("iteration", r.iteration)?;
    d.set_item("loss_phase1", r.loss_phase1)?;
    d.set_item("loss_phase2", r.loss_phase2)?;
    d.set_item("balance_gap", r.balance_gap)?;
    d.set_item("estimation_error", r.estimation_error)?;
    d.set_item("dist_to_target", r.dist_to_target)?;
    d.set_item("wall_ms", r.wall_ms)?;
    Ok(d)
}

#[pymethods]
impl PySolveResult {
    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations()
    }
    #[getter]
    fn final_error(&self) -> f64 {
        self.inner.final_error()
    }
    #[getter]
    fn factors(&self) -> PyFactors {
        PyFactors { inner: self.inner.final_factors.clone() }
    }

    /// One dict per recorded iterate, including the initial one.
    fn trajectory<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner.trajectory.iter().map(|r| iter_dict(py, r)).collect()
    }

    /// Estimation error per iterate as a flat list.
    fn errors(&self) -> Vec<f64> {
        self.inner.trajectory.iter().map(|r| r.estimation_error).collect()
    }
}

fn solved(r: lrmt::Result<core_solvers::SolveResult>) -> PyResult<PySolveResult> {
    r.map(|inner| PySolveResult { inner }).map_err(to_py)
}

/// Two-phase gradient descent from `init`.
#[pyfunction]
fn tpgd(data: &PyDataset, gt: &PyGroundTruth, hp: &PyHyperParams, init: &PyFactors) -> PyResult<PySolveResult> {
    solved(core_solvers::tpgd_from(&data.inner, &gt.inner, &hp.inner, &init.inner, SolveOptions::default()))
}

/// Constant-step GD on the data-fit loss.
#[pyfunction]
fn gd_loss1(data: &PyDataset, gt: &PyGroundTruth, eta: f64, iters: usize, init: &PyFactors) -> PyResult<PySolveResult> {
    solved(core_solvers::gd_loss1(&data.inner, &gt.inner, eta, iters, &init.inner, SolveOptions::default()))
}

/// Constant-step GD on the data-fit loss plus `½‖BᵀB − WWᵀ‖²`.
#[pyfunction]
fn gd_loss2(data: &PyDataset, gt: &PyGroundTruth, eta: f64, iters: usize, init: &PyFactors) -> PyResult<PySolveResult> {
    solved(core_solvers::gd_loss2(&data.inner, &gt.inner, eta, iters, &init.inner, SolveOptions::default()))
}

/// Constant-step GD on the balanced loss (Phase II alone).
#[pyfunction]
fn phase2(data: &PyDataset, gt: &PyGroundTruth, eta: f64, iters: usize, init: &PyFactors) -> PyResult<PySolveResult> {
    solved(core_solvers::phase2_from(&data.inner, &gt.inner, eta, iters, &init.inner, SolveOptions::default()))
}

/// Noisy GD with geometrically decaying Gaussian perturbations.
#[pyfunction]
#[pyo3(signature = (data, gt, eta, iters, init, seed, initial_std=None, decay=None))]
#[allow(clippy::too_many_arguments)]
fn nsgd(
    data: &PyDataset,
    gt: &PyGroundTruth,
    eta: f64,
    iters: usize,
    init: &PyFactors,
    seed: u64,
    initial_std: Option<f64>,
    decay: Option<f64>,
) -> PyResult<PySolveResult> {
    let mut noise = NoiseSchedule::default_for(eta);
    if let Some(s) = initial_std {
        noise.initial_std = s;
    }
    if let Some(r) = decay {
        noise.decay = r;
    }
    solved(core_solvers::nsgd(
        &data.inner,
        &gt.inner,
        eta,
        iters,
        noise,
        &init.inner,
        SolveOptions::default(),
        &mut SeededRng::new(seed, 3),
    ))
}

#[pyfunction]
fn procrustes_distance(u: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> PyResult<f64> {
    procrustes(&matrix(u)?, &matrix(v)?).map_err(to_py)
}

#[pyclass(name = "DecaySchedule", frozen)]
struct PyDecaySchedule {
    inner: core_transfer::DecaySchedule,
}

fn parse_log_base(name: &str) -> PyResult<LogBase> {
    match name {
        "natural" | "e" => Ok(LogBase::Natural),
        "two" | "2" => Ok(LogBase::Two),
        other => Err(PyValueError::new_err(format!("unknown log base '{other}'"))),
    }
}

#[pymethods]
impl PyDecaySchedule {
    #[new]
    #[pyo3(signature = (eta0, h, k2, log_base="natural"))]
    fn new(eta0: f64, h: usize, k2: usize, log_base: &str) -> PyResult<Self> {
        let inner = core_transfer::DecaySchedule::with_log_base(eta0, h, k2, parse_log_base(log_base)?).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn k2_prime(&self) -> usize {
        self.inner.k2_prime
    }

    fn step_size(&self, tau: usize) -> PyResult<f64> {
        self.inner.step_size(tau).map_err(to_py)
    }
}

/// SGD on a fresh target task through `b_hat` (defaults to `B*`), with
/// identity covariance and a random unit-signal target. Returns
/// `(w_final, [(iteration, excess_risk), ...])`.
#[pyfunction]
#[pyo3(signature = (gt, k2, seed, b_hat=None, log_base="natural"))]
fn transfer(
    gt: &PyGroundTruth,
    k2: usize,
    seed: u64,
    b_hat: Option<Vec<Vec<f64>>>,
    log_base: &str,
) -> PyResult<(Vec<f64>, Vec<(usize, f64)>)> {
    let gt = &gt.inner;
    let b_hat = match b_hat {
        Some(rows) => matrix(rows)?,
        None => gt.b_star.clone(),
    };
    let h_cov = Matrix::identity(gt.d);
    let w_target = synthdata::random_target_weight(gt, &mut SeededRng::new(seed, 3));
    let stream = synthdata::sample_target_stream(gt, &w_target, &h_cov, k2, SeededRng::new(seed, 4)).map_err(to_py)?;
    let oracle = RiskOracle::new(gt, &w_target, &h_cov).map_err(to_py)?;
    let eta0 = core_transfer::default_eta0(&b_hat, &h_cov).map_err(to_py)?;
    let sched = core_transfer::DecaySchedule::with_log_base(
        eta0,
        core_transfer::DecaySchedule::default_h(k2),
        k2,
        parse_log_base(log_base)?,
    )
    .map_err(to_py)?;
    let res = core_transfer::sgd_transfer(
        &b_hat,
        stream,
        &sched,
        &vec![0.0; b_hat.cols()],
        &Checkpoints { every: 0, oracle: Some(&oracle) },
    )
    .map_err(to_py)?;
    Ok((res.w_final, res.excess_risk_trace))
}

fn record_dict<'py>(py: Python<'py>, r: &ExperimentRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("family", &r.family)?;
    d.set_item("method", &r.method)?;
    d.set_item("seed", r.seed)?;
    d.set_item("d", r.d)?;
    d.set_item("k", r.k)?;
    d.set_item("T", r.t_count)?;
    d.set_item("N", r.n)?;
    d.set_item("iteration", r.iteration)?;
    d.set_item("train_loss", r.train_loss)?;
    d.set_item("estimation_error", r.estimation_error)?;
    d.set_item("balance_gap", r.balance_gap)?;
    d.set_item("dist_to_target", r.dist_to_target)?;
    d.set_item("wall_ms", r.wall_ms)?;
    d.set_item("diverged", r.diverged)?;
    Ok(d)
}

/// Runs an experiment family. `config` is TOML text with a table per family.
/// Writes `<out>/<family>.csv` when `out` is given. Returns the rows as dicts.
#[pyfunction]
#[pyo3(signature = (family, config=None, seeds=None, out=None))]
fn run_family<'py>(
    py: Python<'py>,
    family: &str,
    config: Option<&str>,
    seeds: Option<Vec<u64>>,
    out: Option<&str>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let family: Family = family.parse().map_err(to_py)?;
    let mut cfg = ExperimentConfig::from_toml_str(family, config.unwrap_or("")).map_err(to_py)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    let output = py.detach(|| harness::run_family(&cfg)).map_err(to_py)?;
    if let Some(dir) = out {
        let path = std::path::Path::new(dir).join(format!("{family}.csv"));
        harness::write_csv(&path, &output.records).map_err(to_py)?;
    }
    output.records.iter().map(|r| record_dict(py, r)).collect()
}

/// OLS on `(ln x, ln y)`; returns `{"slope", "intercept", "r2"}`.
#[pyfunction]
fn fit_power_law<'py>(py: Python<'py>, points: Vec<(f64, f64)>) -> PyResult<Bound<'py, PyDict>> {
    let f = harness::fit_power_law(&points).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("slope", f.slope)?;
    d.set_item("intercept", f.intercept)?;
    d.set_item("r2", f.r2)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "lrmt")]
fn lrmt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGroundTruth>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyFactors>()?;
    m.add_class::<PyHyperParams>()?;
    m.add_class::<PySolveResult>()?;
    m.add_class::<PyDecaySchedule>()?;
    m.add_function(wrap_pyfunction!(tpgd, m)?)?;
    m.add_function(wrap_pyfunction!(gd_loss1, m)?)?;
    m.add_function(wrap_pyfunction!(gd_loss2, m)?)?;
    m.add_function(wrap_pyfunction!(phase2, m)?)?;
    m.add_function(wrap_pyfunction!(nsgd, m)?)?;
    m.add_function(wrap_pyfunction!(procrustes_distance, m)?)?;
    m.add_function(wrap_pyfunction!(transfer, m)?)?;
    m.add_function(wrap_pyfunction!(run_family, m)?)?;
    m.add_function(wrap_pyfunction!(fit_power_law, m)?)?;
    Ok(())
}
