//! Python bindings. Matrices cross the boundary as lists of rows.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use scalemix::cgf::{cgf_eval, joint_cumulant, DependenceSpec};
use scalemix::conditional::{self, ConditioningSet, McmcConfig, SaddlepointInterpolator};
use scalemix::covmodel::{CovKind, CovModel, MeanModel, SiteSet};
use scalemix::diagnostics;
use scalemix::estimate::{estimate_all, EstimationConfig, OptimizerConfig};
use scalemix::mixture::{self, CumulantVector, GammaMixture, MomentVector};
use scalemix::simulate::{self, grid_spec_to_sites, GridSpec, SampleMatrix};

fn err(e: scalemix::Error) -> PyErr {
    use scalemix::Error as E;
    match e {
        E::NotPositiveDefinite { .. } | E::OutsideStrip { .. } | E::Solver { .. } | E::Optimization(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Row-list to sample matrix; rows must share one length.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> scalemix::Result<SampleMatrix> {
    SampleMatrix::from_rows(rows)
}

pub fn rows_of(m: &SampleMatrix) -> Vec<Vec<f64>> {
    m.rows().map(<[f64]>::to_vec).collect()
}

pub fn parse_kind(kind: &str) -> scalemix::Result<CovKind> {
    match kind {
        "powered_exponential" | "exponential" => Ok(CovKind::PoweredExponential),
        "matern" => Ok(CovKind::Matern),
        other => Err(scalemix::Error::Input(format!(
            "unknown covariance kind '{other}' (expected powered_exponential or matern)"
        ))),
    }
}

/// Gamma mixture for the scaling variable `V`.
#[pyclass(name = "Mixture", module = "scalemix", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyMixture {
    inner: GammaMixture,
}

#[pymethods]
impl PyMixture {
    /// Unit-mean mixture from component weights, shapes and scales.
    #[new]
    fn new(weights: Vec<f64>, shapes: Vec<f64>, scales: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: GammaMixture::new(weights, shapes, scales).map_err(err)?,
        })
    }

    /// The reference five-component mixture; unit mean unless `normalized=False`.
    #[staticmethod]
    #[pyo3(signature = (normalized = true))]
    fn reference(normalized: bool) -> Self {
        let m = GammaMixture::reference();
        Self {
            inner: if normalized { m.normalized() } else { m },
        }
    }

    /// Near-point-mass `V ≈ 1`: the Gaussian limit.
    #[staticmethod]
    fn degenerate() -> Self {
        Self {
            inner: GammaMixture::degenerate(),
        }
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    #[getter]
    fn shapes(&self) -> Vec<f64> {
        self.inner.shapes().to_vec()
    }

    #[getter]
    fn scales(&self) -> Vec<f64> {
        self.inner.scales().to_vec()
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn moments(&self, order: usize) -> Vec<f64> {
        self.inner.moments(order).0
    }

    fn cumulants(&self, order: usize) -> PyResult<Vec<f64>> {
        Ok(mixture::moments_to_cumulants(&self.inner.moments(order)).map_err(err)?.0)
    }

    fn density(&self, v: f64) -> PyResult<f64> {
        self.inner.density(v).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Mixture(weights={:?}, shapes={:?}, scales={:?})",
            self.inner.weights(),
            self.inner.shapes(),
            self.inner.scales()
        )
    }
}

/// Field model: sites, covariance, constant mean and scaling mixture.
#[pyclass(name = "Model", module = "scalemix", frozen)]
pub struct PyModel {
    inner: DependenceSpec,
}

#[pymethods]
impl PyModel {
    /// `mixture=None` gives a Gaussian field.
    #[new]
    #[pyo3(signature = (sites, range, shape = 1.0, sill = 1.0, nugget = 0.0, kind = "powered_exponential", mixture = None, mean = 0.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        sites: Vec<(f64, f64)>,
        range: f64,
        shape: f64,
        sill: f64,
        nugget: f64,
        kind: &str,
        mixture: Option<PyRef<'_, PyMixture>>,
        mean: f64,
    ) -> PyResult<Self> {
        let sites = SiteSet::new(sites.into_iter().map(|(x, y)| [x, y]).collect()).map_err(err)?;
        Self::build(sites, range, shape, sill, nugget, kind, mixture.map(|m| m.inner.clone()), mean)
    }

    /// Model on a regular `nx × ny` grid, row-major.
    #[staticmethod]
    #[pyo3(signature = (nx, ny, range, spacing = 1.0, shape = 1.0, sill = 1.0, nugget = 0.0, kind = "powered_exponential", mixture = None, mean = 0.0))]
    #[allow(clippy::too_many_arguments)]
    fn grid(
        nx: usize,
        ny: usize,
        range: f64,
        spacing: f64,
        shape: f64,
        sill: f64,
        nugget: f64,
        kind: &str,
        mixture: Option<PyRef<'_, PyMixture>>,
        mean: f64,
    ) -> PyResult<Self> {
        let sites = grid_spec_to_sites(&GridSpec::new(nx, ny, spacing), simulate::DEFAULT_GRID_CAP).map_err(err)?;
        Self::build(sites, range, shape, sill, nugget, kind, mixture.map(|m| m.inner.clone()), mean)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn sites(&self) -> Vec<(f64, f64)> {
        self.inner.sites().map_or_else(Vec::new, |s| s.coords().iter().map(|c| (c[0], c[1])).collect())
    }

    #[getter]
    fn sigma(&self) -> Vec<Vec<f64>> {
        let s = self.inner.sigma();
        (0..s.nrows()).map(|i| (0..s.ncols()).map(|j| s[(i, j)]).collect()).collect()
    }

    #[getter]
    fn mixture(&self) -> PyMixture {
        PyMixture {
            inner: self.inner.mixture().clone(),
        }
    }

    /// `K_X(t)`.
    fn cgf(&self, t: Vec<f64>) -> PyResult<f64> {
        cgf_eval(&self.inner, &t).map_err(err)
    }

    /// Joint cumulant of the listed components (indices may repeat).
    fn joint_cumulant(&self, indices: Vec<usize>) -> PyResult<f64> {
        joint_cumulant(&self.inner, &indices).map_err(err)
    }

    /// `n` realizations as rows, plus the `V` draws (`None` for `field="gaussian"`).
    #[pyo3(signature = (n, seed, field = "scalemix"))]
    fn simulate(&self, n: usize, seed: u64, field: &str) -> PyResult<(Vec<Vec<f64>>, Option<Vec<f64>>)> {
        let m = match field {
            "scalemix" => simulate::sample_field(&self.inner, n, seed),
            "gaussian" => simulate::sample_gaussian(&self.inner, n, seed),
            other => return Err(PyValueError::new_err(format!("field must be 'scalemix' or 'gaussian', got '{other}'"))),
        };
        Ok((rows_of(&m), m.v_draws().map(<[f64]>::to_vec)))
    }
}

impl PyModel {
    #[allow(clippy::too_many_arguments)]
    fn build(
        sites: SiteSet,
        range: f64,
        shape: f64,
        sill: f64,
        nugget: f64,
        kind: &str,
        mix: Option<GammaMixture>,
        mean: f64,
    ) -> PyResult<Self> {
        let cov = CovModel::new(parse_kind(kind).map_err(err)?, range, shape, nugget, sill).map_err(err)?;
        let spec = DependenceSpec::new(
            sites,
            cov,
            MeanModel::constant(mean),
            &[],
            mix.unwrap_or_else(GammaMixture::degenerate),
        )
        .map_err(err)?;
        Ok(Self { inner: spec })
    }
}

fn conditioning(obs_indices: Vec<usize>, obs_values: Vec<f64>, targets: Vec<(f64, f64)>) -> PyResult<ConditioningSet> {
    let t = SiteSet::with_coincident(targets.into_iter().map(|(x, y)| [x, y]).collect()).map_err(err)?;
    ConditioningSet::new(obs_indices, obs_values, t).map_err(err)
}

/// Saddlepoint CDF of one target given observations at model sites.
#[pyclass(name = "Interpolator", module = "scalemix", frozen)]
pub struct PyInterpolator {
    inner: SaddlepointInterpolator,
}

#[pymethods]
impl PyInterpolator {
    #[new]
    fn new(model: PyRef<'_, PyModel>, obs_indices: Vec<usize>, obs_values: Vec<f64>, target: (f64, f64)) -> PyResult<Self> {
        let cond = conditioning(obs_indices, obs_values, vec![target])?;
        Ok(Self {
            inner: SaddlepointInterpolator::new(&model.inner, &cond).map_err(err)?,
        })
    }

    /// Kriging mean and standard deviation.
    fn kriging(&self) -> (f64, f64) {
        self.inner.kriging()
    }

    fn cdf(&self, a: f64) -> PyResult<f64> {
        Ok(self.inner.cdf(a).map_err(err)?.probability)
    }

    fn gaussian_cdf(&self, a: f64) -> f64 {
        self.inner.gaussian_cdf(a)
    }

    fn quantile(&self, p: f64) -> PyResult<f64> {
        self.inner.quantile(p).map_err(err)
    }

    /// Probability with `r`, `q`, saddlepoints and Newton iteration counts.
    fn detail<'py>(&self, py: Python<'py>, a: f64) -> PyResult<Bound<'py, PyDict>> {
        let r = self.inner.cdf(a).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("probability", r.probability)?;
        d.set_item("r", r.r)?;
        d.set_item("q", r.q)?;
        d.set_item("w_hat", r.w_hat)?;
        d.set_item("w_hat_minus", r.w_hat_minus)?;
        d.set_item("newton_iters", r.newton_iters.to_vec())?;
        d.set_item("interpolated", r.interpolated)?;
        Ok(d)
    }
}

/// `b` conditional realizations at the targets; returns a dict with
/// `samples` (rows), `v` (chain), `acceptance_rate` and `ess`.
#[pyfunction]
#[pyo3(signature = (model, obs_indices, obs_values, targets, b, seed, burn_in = 500, proposal_sd = 1.0, thin = 1))]
#[allow(clippy::too_many_arguments)]
fn conditional_simulate<'py>(
    py: Python<'py>,
    model: PyRef<'_, PyModel>,
    obs_indices: Vec<usize>,
    obs_values: Vec<f64>,
    targets: Vec<(f64, f64)>,
    b: usize,
    seed: u64,
    burn_in: usize,
    proposal_sd: f64,
    thin: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cond = conditioning(obs_indices, obs_values, targets)?;
    let mcmc = McmcConfig {
        burn_in,
        samples: b,
        proposal_sd,
        thin,
        seed,
    };
    let ens = conditional::conditional_simulate(&model.inner, &cond, b, &mcmc).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("samples", rows_of(&ens.samples))?;
    d.set_item("acceptance_rate", ens.chain.acceptance_rate)?;
    d.set_item("ess", ens.chain.ess)?;
    d.set_item("v", ens.chain.samples)?;
    Ok(d)
}

/// Full estimation from data rows at the given sites.
#[pyfunction]
#[pyo3(signature = (data, sites, k = 5, s = 5, seed = 0, restarts = 16, kind = "powered_exponential"))]
fn estimate<'py>(
    py: Python<'py>,
    data: Vec<Vec<f64>>,
    sites: Vec<(f64, f64)>,
    k: usize,
    s: usize,
    seed: u64,
    restarts: usize,
    kind: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let m = matrix_from_rows(&data).map_err(err)?;
    let sites = SiteSet::new(sites.into_iter().map(|(x, y)| [x, y]).collect()).map_err(err)?;
    let cfg = EstimationConfig {
        k,
        s,
        optimizer: OptimizerConfig {
            restarts,
            ..OptimizerConfig::default()
        },
        cov_kind: parse_kind(kind).map_err(err)?,
        seed,
    };
    let r = estimate_all(&m, &sites, &cfg).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("range", r.cov.theta1)?;
    d.set_item("shape", r.cov.theta2)?;
    d.set_item("sill", r.cov.sigma1sq)?;
    d.set_item("nugget", r.cov.sigma0sq)?;
    d.set_item("m_hat", r.m_hat.0)?;
    d.set_item("c_hat", r.c_hat.0)?;
    d.set_item("residual", r.residual)?;
    d.set_item("mixture", PyMixture { inner: r.mix })?;
    d.set_item("warnings", r.diagnostics.warnings)?;
    Ok(d)
}

#[pyfunction]
fn moments_to_cumulants(m: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(mixture::moments_to_cumulants(&MomentVector(m)).map_err(err)?.0)
}

#[pyfunction]
fn cumulants_to_moments(c: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(mixture::cumulants_to_moments(&CumulantVector(c)).map_err(err)?.0)
}

/// Per-realization number of sites strictly above `a`.
#[pyfunction]
fn threshold_counts(data: Vec<Vec<f64>>, a: f64) -> PyResult<Vec<usize>> {
    Ok(diagnostics::threshold_counts(&matrix_from_rows(&data).map_err(err)?, a))
}

/// Per-realization sum of the values above `a`.
#[pyfunction]
fn exceedance_sums(data: Vec<Vec<f64>>, a: f64) -> PyResult<Vec<f64>> {
    Ok(diagnostics::exceedance_sums(&matrix_from_rows(&data).map_err(err)?, a))
}

/// Entropy (nats) of the joint exceedance pattern of the chosen columns.
#[pyfunction]
fn congregation_entropy(data: Vec<Vec<f64>>, indices: Vec<usize>, b: f64) -> PyResult<f64> {
    diagnostics::congregation_entropy(&matrix_from_rows(&data).map_err(err)?, &indices, b).map_err(err)
}

#[pymodule]
#[pyo3(name = "scalemix")]
fn scalemix_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyMixture>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyInterpolator>()?;
    m.add_function(wrap_pyfunction!(conditional_simulate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(moments_to_cumulants, m)?)?;
    m.add_function(wrap_pyfunction!(cumulants_to_moments, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_counts, m)?)?;
    m.add_function(wrap_pyfunction!(exceedance_sums, m)?)?;
    m.add_function(wrap_pyfunction!(congregation_entropy, m)?)?;
    Ok(())
}
