//! Python bindings. Covariates cross the boundary as lists of rows and
//! labels as zero-based group numbers.

use design::online::BalanceMode;
use design::simlab::{run_comparison, OnlineOptions, ScenarioConfig};
use design::{DesignError, GaConfig, PcaTarget};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: DesignError) -> PyErr {
    match e {
        DesignError::State(_) | DesignError::Io(_) | DesignError::Json(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn covariates(rows: Vec<Vec<f64>>, ids: Option<Vec<String>>) -> PyResult<design::CovariateSet> {
    let data = design::CovariateSet::from_rows(&rows).map_err(py_err)?;
    match ids {
        None => Ok(data),
        Some(ids) => design::CovariateSet::new(ids, data.dim(), data.values().to_vec()).map_err(py_err),
    }
}

fn pca_target(pca_q: Option<usize>, pca_var: Option<f64>) -> PyResult<Option<PcaTarget>> {
    match (pca_q, pca_var) {
        (Some(_), Some(_)) => Err(PyValueError::new_err("pass at most one of pca_q and pca_var")),
        (Some(q), None) => Ok(Some(PcaTarget::Components(q))),
        (None, Some(v)) => Ok(Some(PcaTarget::VarianceFraction(v))),
        (None, None) => Ok(None),
    }
}

fn ga_config(
    n: usize,
    population: Option<usize>,
    elites: Option<usize>,
    max_iters: Option<usize>,
    seed: u64,
) -> GaConfig {
    let mut c = GaConfig::scaled_for(n).with_seed(seed);
    if let Some(m) = population {
        c.population = m;
        c.elites = c.elites.min(m);
    }
    if let Some(e) = elites {
        c.elites = e;
    }
    if let Some(i) = max_iters {
        c.max_iters = i;
    }
    c
}

/// Bandwidth matrix `H` for a set of covariate rows.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct Bandwidth {
    inner: design::BandwidthState,
}

#[pymethods]
impl Bandwidth {
    /// Rule-of-thumb bandwidth from shrunk sample covariance.
    #[staticmethod]
    #[pyo3(signature = (rows, shrinkage=None))]
    fn from_data(rows: Vec<Vec<f64>>, shrinkage: Option<f64>) -> PyResult<Self> {
        let data = covariates(rows, None)?;
        Ok(Self {
            inner: design::BandwidthState::from_data(&data, shrinkage).map_err(py_err)?,
        })
    }

    #[getter]
    fn matrix(&self) -> Vec<Vec<f64>> {
        let m = self.inner.matrix();
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    #[getter]
    fn shrinkage(&self) -> f64 {
        self.inner.lambda()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }
}

/// Pairwise kernel integrals for a fixed set of units.
#[pyclass(frozen, skip_from_py_object)]
struct KernelGram {
    inner: design::KernelGram,
}

#[pymethods]
impl KernelGram {
    #[new]
    fn new(rows: Vec<Vec<f64>>, bandwidth: &Bandwidth) -> PyResult<Self> {
        let data = covariates(rows, None)?;
        Ok(Self {
            inner: design::compute_gram(&data, &bandwidth.inner).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn entry(&self, i: usize, j: usize) -> PyResult<f64> {
        if i >= self.inner.len() || j >= self.inner.len() {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.entry(i, j))
    }

    /// Discrepancy `T_H` of a labelling.
    fn criterion(&self, labels: Vec<usize>, groups: usize) -> PyResult<f64> {
        let p = design::Partition::new(labels, groups).map_err(py_err)?;
        design::criterion(&self.inner, &p).map_err(py_err)
    }

    /// Genetic search for a low-discrepancy balanced partition.
    #[pyo3(signature = (groups, population=None, elites=None, max_iters=None, seed=0))]
    fn optimize(
        &self,
        py: Python<'_>,
        groups: usize,
        population: Option<usize>,
        elites: Option<usize>,
        max_iters: Option<usize>,
        seed: u64,
    ) -> PyResult<DesignResult> {
        let config = ga_config(self.inner.len(), population, elites, max_iters, seed);
        let r = py
            .detach(|| design::optimize(&self.inner, groups, &config))
            .map_err(py_err)?;
        Ok(DesignResult {
            labels: r.partition.labels().to_vec(),
            value: r.value,
            trace: r.trace,
        })
    }
}

#[pyclass(frozen, get_all, skip_from_py_object)]
struct DesignResult {
    labels: Vec<usize>,
    value: f64,
    trace: Vec<f64>,
}

#[pymethods]
impl DesignResult {
    fn __repr__(&self) -> String {
        format!("DesignResult(value={:e}, units={})", self.value, self.labels.len())
    }
}

/// Offline design in one call: bandwidth, gram and search.
#[pyfunction]
#[pyo3(signature = (rows, groups, population=None, elites=None, max_iters=None, seed=0, pca_q=None, pca_var=None))]
#[allow(clippy::too_many_arguments)]
fn design_offline(
    py: Python<'_>,
    rows: Vec<Vec<f64>>,
    groups: usize,
    population: Option<usize>,
    elites: Option<usize>,
    max_iters: Option<usize>,
    seed: u64,
    pca_q: Option<usize>,
    pca_var: Option<f64>,
) -> PyResult<DesignResult> {
    let data = covariates(rows, None)?;
    let target = pca_target(pca_q, pca_var)?;
    let config = ga_config(data.len(), population, elites, max_iters, seed);
    let r = py
        .detach(|| -> design::Result<_> {
            let space = match target {
                Some(t) => design::transform(&design::fit_pca(&data, t)?, &data)?,
                None => data.clone(),
            };
            let bw = design::BandwidthState::from_data(&space, None)?;
            let gram = design::compute_gram(&space, &bw)?;
            design::optimize(&gram, groups, &config)
        })
        .map_err(py_err)?;
    Ok(DesignResult {
        labels: r.partition.labels().to_vec(),
        value: r.value,
        trace: r.trace,
    })
}

/// Averaged pairwise Mahalanobis distance between group means.
#[pyfunction]
fn mahalanobis(rows: Vec<Vec<f64>>, labels: Vec<usize>, groups: usize) -> PyResult<f64> {
    let data = covariates(rows, None)?;
    let p = design::Partition::new(labels, groups).map_err(py_err)?;
    Ok(design::metrics::mahalanobis_balance(&data, &p).map_err(py_err)?.mean)
}

/// An online experiment; each batch is assigned with earlier units fixed.
#[pyclass(skip_from_py_object)]
struct OnlineDesign {
    inner: design::OnlineState,
}

#[pymethods]
impl OnlineDesign {
    #[new]
    #[pyo3(signature = (rows, groups, ids=None, population=None, elites=None, max_iters=None, seed=0,
                        balance="strict", freeze_bandwidth=false, pca_q=None, pca_var=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        py: Python<'_>,
        rows: Vec<Vec<f64>>,
        groups: usize,
        ids: Option<Vec<String>>,
        population: Option<usize>,
        elites: Option<usize>,
        max_iters: Option<usize>,
        seed: u64,
        balance: &str,
        freeze_bandwidth: bool,
        pca_q: Option<usize>,
        pca_var: Option<f64>,
    ) -> PyResult<Self> {
        let data = covariates(rows, ids)?;
        let balance = match balance {
            "strict" => BalanceMode::Strict,
            "off" => BalanceMode::Off,
            other => {
                return Err(PyValueError::new_err(format!(
                    "balance must be 'strict' or 'off', got {other:?}"
                )))
            }
        };
        let config = design::OnlineConfig {
            ga: ga_config(data.len(), population, elites, max_iters, seed),
            balance,
            freeze_bandwidth,
            pca: pca_target(pca_q, pca_var)?,
            ..design::OnlineConfig::default()
        };
        let inner = py
            .detach(|| design::init_online(&data, groups, config))
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Assigns a batch and returns `(unit_id, group, treatment)` tuples.
    #[pyo3(signature = (rows, ids=None))]
    fn assign(
        &mut self,
        py: Python<'_>,
        rows: Vec<Vec<f64>>,
        ids: Option<Vec<String>>,
    ) -> PyResult<Vec<(String, usize, usize)>> {
        let batch = match ids {
            Some(ids) => covariates(rows, Some(ids))?,
            None => design::CovariateSet::from_rows_with_offset(&rows, self.inner.units().len()).map_err(py_err)?,
        };
        let (next, out) = py.detach(|| self.inner.assign_batch(&batch)).map_err(py_err)?;
        self.inner = next;
        Ok(out.into_iter().map(|a| (a.unit_id, a.group, a.treatment)).collect())
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn sizes(&self) -> Vec<usize> {
        self.inner.sizes()
    }

    #[getter]
    fn batches(&self) -> usize {
        self.inner.batches()
    }

    /// `T_H` over all units assigned so far.
    fn criterion(&self) -> PyResult<f64> {
        self.inner.criterion().map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_snapshot_json().map_err(py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: design::OnlineState::from_snapshot_json(text).map_err(py_err)?,
        })
    }
}

/// Runs a simulation comparison and returns the JSON summary.
#[pyfunction]
#[pyo3(signature = (scenario, groups=2, n=None, replicates=30, seed=0, online_initial=None, online_batch=None, max_iters=None))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    scenario: &str,
    groups: usize,
    n: Option<usize>,
    replicates: usize,
    seed: u64,
    online_initial: Option<usize>,
    online_batch: Option<usize>,
    max_iters: Option<usize>,
) -> PyResult<String> {
    let scenario: design::simlab::Scenario = scenario.parse().map_err(py_err)?;
    let n = n.unwrap_or(match scenario {
        design::simlab::Scenario::Case1 | design::simlab::Scenario::Case2 => 100 * groups,
        _ => 400,
    });
    let mut config = ScenarioConfig::new(scenario, groups, n);
    config.replicates = replicates;
    config.seed = seed;
    if let Some(i) = max_iters {
        config.ga.max_iters = i;
    }
    config.online = match (online_initial, online_batch) {
        (Some(initial), Some(batch)) => Some(OnlineOptions { initial, batch }),
        (None, None) => None,
        _ => return Err(PyValueError::new_err("online_initial and online_batch go together")),
    };
    py.detach(|| run_comparison(&config)?.summary_json()).map_err(py_err)
}

#[pymodule]
fn abdesign(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Bandwidth>()?;
    m.add_class::<KernelGram>()?;
    m.add_class::<DesignResult>()?;
    m.add_class::<OnlineDesign>()?;
    m.add_function(wrap_pyfunction!(design_offline, m)?)?;
    m.add_function(wrap_pyfunction!(mahalanobis, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
