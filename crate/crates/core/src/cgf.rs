//! The dependence structure `K_X(t) = δ(½ tᵀΣt)` with `δ = log M_V`, its
//! derivatives, joint cumulants and product moments of the field.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::covmodel::{cov_matrix, mean_vector, Cholesky, CovModel, MeanModel, SiteSet};
use crate::error::{Error, Result};
use crate::mixture::{moments_to_cumulants, CumulantVector, GammaMixture, MomentVector, MEAN_TOLERANCE};
use crate::special::rising_factorial;

/// Largest even order handled by the pair-partition formulas.
pub const MAX_CUMULANT_ORDER: usize = 10;

/// `K(t) = δ(½ tᵀΣt)` for an arbitrary covariance matrix; shared by the
/// field c.g.f. and its extended (interpolation) counterpart.
#[derive(Debug, Clone, Copy)]
pub struct ScaleMixtureCgf<'a> {
    pub sigma: &'a DMatrix<f64>,
    pub mix: &'a GammaMixture,
}

impl<'a> ScaleMixtureCgf<'a> {
    pub fn new(sigma: &'a DMatrix<f64>, mix: &'a GammaMixture) -> Self {
        Self { sigma, mix }
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    fn sigma_t(&self, t: &[f64]) -> DVector<f64> {
        assert_eq!(t.len(), self.dim(), "argument length must match the covariance dimension");
        self.sigma * DVector::from_column_slice(t)
    }

    /// `y = ½ tᵀΣt`.
    pub fn quad(&self, t: &[f64]) -> f64 {
        0.5 * self.sigma_t(t).dot(&DVector::from_column_slice(t))
    }

    fn delta(&self, y: f64) -> Result<(f64, f64, f64)> {
        Ok(self.mix.mgf(y)?.log_derivatives())
    }

    pub fn eval(&self, t: &[f64]) -> Result<f64> {
        Ok(self.delta(self.quad(t))?.0)
    }

    /// `∇K = δ′(y) Σt`.
    pub fn grad(&self, t: &[f64]) -> Result<Vec<f64>> {
        let st = self.sigma_t(t);
        let y = 0.5 * st.dot(&DVector::from_column_slice(t));
        let (_, d1, _) = self.delta(y)?;
        Ok(st.iter().map(|v| d1 * v).collect())
    }

    /// `K″ = δ′(y) Σ + δ″(y) (Σt)(Σt)ᵀ`.
    pub fn hessian(&self, t: &[f64]) -> Result<DMatrix<f64>> {
        let st = self.sigma_t(t);
        let y = 0.5 * st.dot(&DVector::from_column_slice(t));
        let (_, d1, d2) = self.delta(y)?;
        Ok(self.sigma * d1 + (&st * st.transpose()) * d2)
    }

    /// Value, gradient and Hessian in one pass.
    pub fn all(&self, t: &[f64]) -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
        let st = self.sigma_t(t);
        let y = 0.5 * st.dot(&DVector::from_column_slice(t));
        let (d0, d1, d2) = self.delta(y)?;
        let grad = st.iter().map(|v| d1 * v).collect();
        let hess = self.sigma * d1 + (&st * st.transpose()) * d2;
        Ok((d0, grad, hess))
    }

    /// Whether `t` lies inside the convergence strip.
    pub fn in_strip(&self, t: &[f64]) -> bool {
        self.quad(t) < self.mix.strip_bound()
    }
}

/// The full field model: sites, mean, covariance (with its Cholesky factor)
/// and scaling variable.
#[derive(Debug, Clone)]
pub struct DependenceSpec {
    sites: Option<SiteSet>,
    cov: Option<CovModel>,
    mean_model: MeanModel,
    mu: Vec<f64>,
    sigma: DMatrix<f64>,
    chol: Cholesky,
    mix: GammaMixture,
    moments: MomentVector,
    cumulants: CumulantVector,
}

impl DependenceSpec {
    pub fn new(
        sites: SiteSet,
        cov: CovModel,
        mean: MeanModel,
        covariates: &[Vec<f64>],
        mix: GammaMixture,
    ) -> Result<Self> {
        let sigma = cov_matrix(&cov, &sites)?;
        let mu = mean_vector(&mean, &sites, covariates)?;
        let mut spec = Self::from_covariance(sigma, mu, mix)?;
        spec.sites = Some(sites);
        spec.cov = Some(cov);
        spec.mean_model = mean;
        Ok(spec)
    }

    /// A model given directly by its covariance matrix, without geometry.
    pub fn from_covariance(sigma: DMatrix<f64>, mu: Vec<f64>, mix: GammaMixture) -> Result<Self> {
        if mu.len() != sigma.nrows() {
            return Err(Error::Input(format!(
                "mean vector has length {} for a {}x{} covariance",
                mu.len(),
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if (mix.mean() - 1.0).abs() > MEAN_TOLERANCE {
            return Err(Error::Domain(format!(
                "field models require E(V) = 1, got {}",
                mix.mean()
            )));
        }
        let chol = Cholesky::new(&sigma)?;
        let moments = mix.moments(MAX_CUMULANT_ORDER / 2);
        let cumulants = moments_to_cumulants(&moments)?;
        Ok(Self {
            sites: None,
            cov: None,
            mean_model: MeanModel::default(),
            mu,
            sigma,
            chol,
            mix,
            moments,
            cumulants,
        })
    }

    /// Same covariance and mean, different scaling variable.
    pub fn with_mixture(&self, mix: GammaMixture) -> Result<Self> {
        let mut spec = Self::from_covariance(self.sigma.clone(), self.mu.clone(), mix)?;
        spec.sites = self.sites.clone();
        spec.cov = self.cov;
        spec.mean_model = self.mean_model.clone();
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sites(&self) -> Option<&SiteSet> {
        self.sites.as_ref()
    }

    pub fn cov_model(&self) -> Option<&CovModel> {
        self.cov.as_ref()
    }

    pub fn mean_model(&self) -> &MeanModel {
        &self.mean_model
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn cholesky(&self) -> &Cholesky {
        &self.chol
    }

    pub fn mixture(&self) -> &GammaMixture {
        &self.mix
    }

    /// Cumulants `c_1..c_5` of `V`.
    pub fn cumulants(&self) -> &CumulantVector {
        &self.cumulants
    }

    pub fn cgf(&self) -> ScaleMixtureCgf<'_> {
        ScaleMixtureCgf::new(&self.sigma, &self.mix)
    }

    /// Sub-model on a subset of the components (Kano consistency: same `V`).
    pub fn marginal(&self, indices: &[usize]) -> Result<Self> {
        for &i in indices {
            if i >= self.dim() {
                return Err(Error::Input(format!("component index {i} out of range")));
            }
        }
        let sigma = DMatrix::from_fn(indices.len(), indices.len(), |a, b| self.sigma[(indices[a], indices[b])]);
        let mu = indices.iter().map(|&i| self.mu[i]).collect();
        let mut spec = Self::from_covariance(sigma, mu, self.mix.clone())?;
        if let Some(s) = &self.sites {
            spec.sites = Some(s.subset(indices)?);
        }
        spec.cov = self.cov;
        Ok(spec)
    }
}

/// `K_X(t)`.
pub fn cgf_eval(spec: &DependenceSpec, t: &[f64]) -> Result<f64> {
    spec.cgf().eval(t)
}

pub fn cgf_grad(spec: &DependenceSpec, t: &[f64]) -> Result<Vec<f64>> {
    spec.cgf().grad(t)
}

pub fn cgf_hessian(spec: &DependenceSpec, t: &[f64]) -> Result<DMatrix<f64>> {
    spec.cgf().hessian(t)
}

/// All perfect matchings of `0..k` (k even), each as a list of pairs.
/// Built by pairing the smallest unpaired element with every other one.
pub fn pair_partitions(k: usize) -> Vec<Vec<(usize, usize)>> {
    fn rec(rest: &[usize], current: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        let Some((&first, tail)) = rest.split_first() else {
            out.push(current.clone());
            return;
        };
        for (pos, &partner) in tail.iter().enumerate() {
            let remaining: Vec<usize> = tail
                .iter()
                .enumerate()
                .filter(|(p, _)| *p != pos)
                .map(|(_, v)| *v)
                .collect();
            current.push((first, partner));
            rec(&remaining, current, out);
            current.pop();
        }
    }
    let mut out = Vec::new();
    if k % 2 == 0 {
        let items: Vec<usize> = (0..k).collect();
        rec(&items, &mut Vec::new(), &mut out);
    }
    out
}

fn check_indices(dim: usize, indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::Input("cumulant order must be at least 1".into()));
    }
    if indices.len() > MAX_CUMULANT_ORDER {
        return Err(Error::Size(format!(
            "cumulant order {} exceeds the supported maximum {MAX_CUMULANT_ORDER}",
            indices.len()
        )));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
        return Err(Error::Input(format!("component index {bad} out of range for dimension {dim}")));
    }
    Ok(())
}

/// Covariance interdependence factor: `Σ_P Π_{{a,b}∈P} Σ_{j_a j_b}` over
/// all pair partitions of the index tuple. Zero for odd length.
pub fn rho_factor(sigma: &DMatrix<f64>, indices: &[usize]) -> Result<f64> {
    check_indices(sigma.nrows(), indices)?;
    if indices.len() % 2 == 1 {
        return Ok(0.0);
    }
    Ok(pair_partitions(indices.len())
        .iter()
        .map(|p| p.iter().map(|&(a, b)| sigma[(indices[a], indices[b])]).product::<f64>())
        .sum())
}

/// Joint cumulant `κ^{j₁…j_k} = c_{k/2} · ρ(j₁…j_k)`; odd orders are zero.
///
/// The prefactor is the one obtained by differentiating `K_X` directly.
/// `c_1` is taken as exactly 1, so order two returns `Σ_ij`.
pub fn joint_cumulant(spec: &DependenceSpec, indices: &[usize]) -> Result<f64> {
    let rho = rho_factor(&spec.sigma, indices)?;
    let r = indices.len() / 2;
    if indices.len() % 2 == 1 {
        return Ok(0.0);
    }
    let c = if r == 1 { 1.0 } else { spec.cumulants.get(r) };
    Ok(c * rho)
}

/// Central product moment `E(Π (X_j − μ_j)) = m_{k/2} · ρ` (with `m_1 = 1`).
pub fn product_moment(spec: &DependenceSpec, indices: &[usize]) -> Result<f64> {
    let rho = rho_factor(&spec.sigma, indices)?;
    let r = indices.len() / 2;
    if indices.len() % 2 == 1 {
        return Ok(0.0);
    }
    let m = if r == 1 { 1.0 } else { spec.moments.get(r) };
    Ok(m * rho)
}

/// `E((R²)^k) = m_k 2^k Γ(k + J/2)/Γ(J/2)` for the squared generating
/// variable of a `J`-dimensional field.
pub fn r2_moment(m: &MomentVector, dim: usize, k: usize) -> Result<f64> {
    if k == 0 || k > m.order() {
        return Err(Error::Input(format!("moment order {k} not available (have {})", m.order())));
    }
    if dim == 0 {
        return Err(Error::Input("dimension must be positive".into()));
    }
    Ok(m.get(k) * 2f64.powi(k as i32) * rising_factorial(dim as f64 / 2.0, k as u32))
}

/// Summary of the model's interaction coefficients, for reports.
#[derive(Debug, Clone, Serialize)]
pub struct CumulantSummary {
    pub moments: Vec<f64>,
    pub cumulants: Vec<f64>,
    /// Marginal excess kurtosis `3 c₂` of a unit-variance component.
    pub marginal_excess_kurtosis: f64,
}

pub fn cumulant_summary(spec: &DependenceSpec) -> CumulantSummary {
    CumulantSummary {
        moments: spec.moments.0.clone(),
        cumulants: spec.cumulants.0.clone(),
        marginal_excess_kurtosis: 3.0 * spec.cumulants.get(2),
    }
}
