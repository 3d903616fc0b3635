//! Python bindings for the `fedshap` core.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fedshap::aggregation::{ClientUpdate, Hyper, StrategyKind};
use fedshap::contribution::{self, RoundShapleyLog};
use fedshap::runner::ExperimentConfig;
use fedshap::shapley::{CharacteristicFn, Coalition, DEFAULT_EXACT_CAP};
use fedshap::{analysis, data, Error, ParamVector, ShapleyVector};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::DimensionMismatch { .. }
        | Error::EmptyDataset
        | Error::EmptyUpdates
        | Error::KrumTooFewUpdates { .. }
        | Error::TooManyPlayers { .. }
        | Error::NonNormalizable { .. }
        | Error::Idx(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// A game given as a table of coalition values indexed by bitmask.
fn game(
    values: Vec<f64>,
) -> PyResult<CharacteristicFn<impl Fn(Coalition) -> fedshap::Result<f64> + Sync>> {
    let n = values.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(PyValueError::new_err(format!(
            "coalition table length must be a power of two, got {n}"
        )));
    }
    let players = n.trailing_zeros() as usize;
    Ok(CharacteristicFn::new(players, move |c: Coalition| {
        Ok(values[c.0 as usize])
    }))
}

fn shapley_log(rounds: Vec<Vec<f64>>) -> PyResult<RoundShapleyLog> {
    RoundShapleyLog::from_rounds(
        rounds
            .into_iter()
            .map(|values| ShapleyVector { values })
            .collect(),
    )
    .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (alpha, n, seed=0))]
fn sample_dirichlet(alpha: f64, n: usize, seed: u64) -> PyResult<Vec<f64>> {
    data::sample_dirichlet(alpha, n, seed).map_err(to_py)
}

#[pyfunction]
fn expected_equal_error(n: usize, alpha: f64) -> PyResult<f64> {
    analysis::expected_equal_error(n, alpha).map_err(to_py)
}

/// Returns `(analytic, empirical, relative_error)`.
#[pyfunction]
#[pyo3(signature = (n, alpha, draws=200_000, seed=0))]
fn lemma_check(
    py: Python<'_>,
    n: usize,
    alpha: f64,
    draws: usize,
    seed: u64,
) -> PyResult<(f64, f64, f64)> {
    let c = py
        .detach(|| analysis::lemma_check(n, alpha, draws, seed))
        .map_err(to_py)?;
    Ok((c.analytic, c.empirical, c.relative_error))
}

/// Exact Shapley values of a game given as `2**K` coalition values.
#[pyfunction]
fn exact_shapley(values: Vec<f64>) -> PyResult<Vec<f64>> {
    let v = game(values)?;
    Ok(fedshap::shapley::exact_shapley(&v, DEFAULT_EXACT_CAP)
        .map_err(to_py)?
        .values)
}

#[pyfunction]
#[pyo3(signature = (values, num_permutations, seed=0))]
fn monte_carlo_shapley(values: Vec<f64>, num_permutations: usize, seed: u64) -> PyResult<Vec<f64>> {
    let v = game(values)?;
    Ok(
        fedshap::shapley::monte_carlo_shapley(&v, num_permutations, seed)
            .map_err(to_py)?
            .values,
    )
}

/// Inverse-linear weighted sum of per-round Shapley vectors up to `halting_round`.
#[pyfunction]
fn weighted_cumulative(rounds: Vec<Vec<f64>>, halting_round: usize) -> PyResult<Vec<f64>> {
    contribution::weighted_cumulative(&shapley_log(rounds)?, halting_round).map_err(to_py)
}

#[pyfunction]
fn normalize(raw: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(contribution::normalize(&raw).map_err(to_py)?.percentages)
}

#[pyfunction]
fn ground_truth(sizes: Vec<usize>) -> PyResult<Vec<f64>> {
    Ok(contribution::ground_truth(&sizes)
        .map_err(to_py)?
        .percentages)
}

/// Returns `(halting_round, distance)`.
#[pyfunction]
fn optimal_halting_round(rounds: Vec<Vec<f64>>, truth: Vec<f64>) -> PyResult<(usize, f64)> {
    let truth = contribution::GroundTruth { percentages: truth };
    let c = contribution::optimal_halting_round(&shapley_log(rounds)?, &truth).map_err(to_py)?;
    Ok((c.halting_round, c.distance))
}

#[pyfunction]
fn sq_euclid(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    analysis::sq_euclid(&a, &b).map_err(to_py)
}

#[pyfunction]
fn chebyshev(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    analysis::chebyshev(&a, &b).map_err(to_py)
}

/// Server-side aggregation state. Updates are `(client_id, params, num_examples)` tuples.
#[pyclass(name = "ServerState")]
struct PyServerState(fedshap::ServerState);

fn updates(raw: Vec<(usize, Vec<f64>, usize)>) -> PyResult<Vec<ClientUpdate>> {
    raw.into_iter()
        .map(|(client_id, params, num_examples)| {
            Ok(ClientUpdate {
                client_id,
                params: ParamVector::new(params).map_err(to_py)?,
                num_examples,
            })
        })
        .collect()
}

#[pymethods]
impl PyServerState {
    #[new]
    #[pyo3(signature = (strategy, global_params, eta=None, beta1=None, beta2=None, tau=None, server_momentum=None, trim_fraction=None, byzantine=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        strategy: &str,
        global_params: Vec<f64>,
        eta: Option<f64>,
        beta1: Option<f64>,
        beta2: Option<f64>,
        tau: Option<f64>,
        server_momentum: Option<f64>,
        trim_fraction: Option<f64>,
        byzantine: Option<usize>,
    ) -> PyResult<Self> {
        let kind: StrategyKind = strategy.parse().map_err(to_py)?;
        let d = Hyper::default();
        let hyper = Hyper {
            eta: eta.unwrap_or(d.eta),
            beta1: beta1.unwrap_or(d.beta1),
            beta2: beta2.unwrap_or(d.beta2),
            tau: tau.unwrap_or(d.tau),
            server_momentum: server_momentum.unwrap_or(d.server_momentum),
            trim_fraction: trim_fraction.unwrap_or(d.trim_fraction),
            byzantine: byzantine.unwrap_or(d.byzantine),
        };
        hyper.validate().map_err(to_py)?;
        let params = ParamVector::new(global_params).map_err(to_py)?;
        Ok(PyServerState(fedshap::ServerState::new(
            kind, params, hyper,
        )))
    }

    /// Aggregates one round, advances this state and returns the new global parameters.
    fn combine(&mut self, updates_: Vec<(usize, Vec<f64>, usize)>) -> PyResult<Vec<f64>> {
        let (params, next) = self.0.combine(&updates(updates_)?).map_err(to_py)?;
        self.0 = next;
        Ok(params.into_vec())
    }

    /// What the aggregate would be for this subset only; the state is not changed.
    fn subset_combine(&self, updates_: Vec<(usize, Vec<f64>, usize)>) -> PyResult<Vec<f64>> {
        Ok(self
            .0
            .subset_combine(&updates(updates_)?)
            .map_err(to_py)?
            .into_vec())
    }

    #[getter]
    fn strategy(&self) -> &'static str {
        self.0.kind.name()
    }

    #[getter]
    fn round(&self) -> u64 {
        self.0.round
    }

    #[getter]
    fn global_params(&self) -> Vec<f64> {
        self.0.global_params.as_slice().to_vec()
    }

    #[getter]
    fn momentum(&self) -> Option<Vec<f64>> {
        self.0.momentum.as_ref().map(|m| m.as_slice().to_vec())
    }

    #[getter]
    fn second_moment(&self) -> Option<Vec<f64>> {
        self.0.second_moment.as_ref().map(|m| m.as_slice().to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "ServerState(strategy={:?}, round={})",
            self.0.kind.name(),
            self.0.round
        )
    }
}

/// Runs an experiment described by a TOML string and returns one dict per cell.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config_toml: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let config = ExperimentConfig::from_toml_str(config_toml).map_err(to_py)?;
    let output = py
        .detach(|| fedshap::runner::run_experiment(&config))
        .map_err(to_py)?;
    output
        .table
        .cells
        .into_iter()
        .map(|c| {
            let d = PyDict::new(py);
            d.set_item("task", c.task)?;
            d.set_item("alpha", c.alpha)?;
            d.set_item("epochs", c.epochs)?;
            d.set_item("strategy", c.strategy.name())?;
            d.set_item("seed", c.seed)?;
            d.set_item("halting_round", c.halting_round)?;
            d.set_item("ground_truth", c.ground_truth)?;
            d.set_item("raw", c.raw)?;
            d.set_item("contribution", c.contribution)?;
            d.set_item("raw_shapley_sum", c.raw_shapley_sum)?;
            d.set_item("sq_euclid", c.sq_euclid)?;
            d.set_item("chebyshev", c.chebyshev)?;
            d.set_item("optimal_r", c.optimal_r)?;
            d.set_item("flags", c.flags)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn fedshap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add(
        "STRATEGIES",
        StrategyKind::ALL.map(StrategyKind::name).to_vec(),
    )?;
    m.add_class::<PyServerState>()?;
    m.add_function(wrap_pyfunction!(sample_dirichlet, m)?)?;
    m.add_function(wrap_pyfunction!(expected_equal_error, m)?)?;
    m.add_function(wrap_pyfunction!(lemma_check, m)?)?;
    m.add_function(wrap_pyfunction!(exact_shapley, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo_shapley, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_cumulative, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(ground_truth, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_halting_round, m)?)?;
    m.add_function(wrap_pyfunction!(sq_euclid, m)?)?;
    m.add_function(wrap_pyfunction!(chebyshev, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
