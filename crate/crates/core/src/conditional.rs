//! Inference at ungauged sites: saddlepoint approximation of the
//! conditional CDF, Metropolis sampling of `V` given observations, and
//! conditional simulation through the latent Gaussian field.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cgf::{DependenceSpec, ScaleMixtureCgf};
use crate::covmodel::{cov_matrix, cross_cov, mean_vector, Cholesky, SiteSet};
use crate::error::{Error, Result};
use crate::mixture::GammaMixture;
use crate::simulate::{realization_rng, SampleMatrix};
use crate::special::{norm_cdf, norm_pdf};

/// Saddle equations are solved to this sup-norm residual.
pub const SADDLE_TOLERANCE: f64 = 1e-9;
/// Inside `|r| < NEAR_MEAN_BAND` the tail formula is replaced by
/// interpolation between nodes just outside the band.
pub const NEAR_MEAN_BAND: f64 = 1e-2;
const MAX_NEWTON: usize = 100;
/// Chains whose effective sample size falls below this are flagged.
pub const MIN_ESS: f64 = 10.0;

/// Observed values at a subset of a model's sites, and the new locations
/// at which the field is wanted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningSet {
    pub obs_indices: Vec<usize>,
    pub obs_values: Vec<f64>,
    pub target_sites: SiteSet,
    /// Covariate rows of the targets, needed only for models with drift.
    #[serde(default)]
    pub target_covariates: Vec<Vec<f64>>,
}

impl ConditioningSet {
    pub fn new(obs_indices: Vec<usize>, obs_values: Vec<f64>, target_sites: SiteSet) -> Result<Self> {
        let set = Self {
            obs_indices,
            obs_values,
            target_sites,
            target_covariates: Vec::new(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn with_target_covariates(mut self, covariates: Vec<Vec<f64>>) -> Self {
        self.target_covariates = covariates;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_indices.is_empty() {
            return Err(Error::Input("at least one observation is required".into()));
        }
        if self.obs_indices.len() != self.obs_values.len() {
            return Err(Error::Input(format!(
                "{} observation indices for {} values",
                self.obs_indices.len(),
                self.obs_values.len()
            )));
        }
        let mut seen = self.obs_indices.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("observation indices must be distinct".into()));
        }
        if let Some(v) = self.obs_values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite observed value {v}")));
        }
        if self.target_sites.is_empty() {
            return Err(Error::Input("at least one target site is required".into()));
        }
        Ok(())
    }

    pub fn n_obs(&self) -> usize {
        self.obs_indices.len()
    }

    pub fn n_targets(&self) -> usize {
        self.target_sites.len()
    }
}

/// `[Σ, k; kᵀ, K*]` over the model's sites followed by the targets.
///
/// A target coinciding with a site duplicates a row; the Cholesky check then
/// fails and the error is returned.
pub fn extend_sigma(spec: &DependenceSpec, cond: &ConditioningSet) -> Result<DMatrix<f64>> {
    let (sites, model) = geometry(spec)?;
    let j = sites.len();
    let m = cond.n_targets();
    let k = cross_cov(model, sites, &cond.target_sites)?;
    let kt = cov_matrix(model, &cond.target_sites)?;
    let mut out = DMatrix::zeros(j + m, j + m);
    out.view_mut((0, 0), (j, j)).copy_from(spec.sigma());
    out.view_mut((0, j), (j, m)).copy_from(&k);
    out.view_mut((j, 0), (m, j)).copy_from(&k.transpose());
    out.view_mut((j, j), (m, m)).copy_from(&kt);
    Cholesky::new(&out)?;
    Ok(out)
}

fn geometry(spec: &DependenceSpec) -> Result<(&SiteSet, &crate::covmodel::CovModel)> {
    match (spec.sites(), spec.cov_model()) {
        (Some(s), Some(c)) => Ok((s, c)),
        _ => Err(Error::Input(
            "conditioning needs a model with sites and a covariance function".into(),
        )),
    }
}

/// Covariance blocks and centered data shared by all conditional methods.
#[derive(Debug, Clone)]
struct Blocks {
    /// Centered observations `x − μ_obs`.
    x: Vec<f64>,
    sigma_oo: DMatrix<f64>,
    chol_oo: Cholesky,
    /// `J_obs × M` cross-covariance.
    k_ot: DMatrix<f64>,
    k_tt: DMatrix<f64>,
    mu_t: Vec<f64>,
}

impl Blocks {
    fn new(spec: &DependenceSpec, cond: &ConditioningSet) -> Result<Self> {
        cond.validate()?;
        let (sites, model) = geometry(spec)?;
        if let Some(&i) = cond.obs_indices.iter().find(|&&i| i >= sites.len()) {
            return Err(Error::Input(format!(
                "observation index {i} out of range for {} sites",
                sites.len()
            )));
        }
        let obs_sites = sites.subset(&cond.obs_indices)?;
        let idx = &cond.obs_indices;
        let sigma_oo = DMatrix::from_fn(idx.len(), idx.len(), |a, b| spec.sigma()[(idx[a], idx[b])]);
        let chol_oo = Cholesky::new(&sigma_oo)?;
        let x = idx
            .iter()
            .zip(&cond.obs_values)
            .map(|(&i, v)| v - spec.mu()[i])
            .collect();
        let k_ot = cross_cov(model, &obs_sites, &cond.target_sites)?;
        let k_tt = cov_matrix(model, &cond.target_sites)?;
        let mu_t = mean_vector(spec.mean_model(), &cond.target_sites, &cond.target_covariates)?;
        Ok(Self {
            x,
            sigma_oo,
            chol_oo,
            k_ot,
            k_tt,
            mu_t,
        })
    }

    /// `A = K_toΣ_oo⁻¹` as an `M × J_obs` matrix.
    fn kriging_weights(&self) -> DMatrix<f64> {
        let m = self.k_ot.ncols();
        let j = self.k_ot.nrows();
        let mut a = DMatrix::zeros(m, j);
        for t in 0..m {
            let col: Vec<f64> = self.k_ot.column(t).iter().copied().collect();
            let w = self.chol_oo.solve(&col);
            for o in 0..j {
                a[(t, o)] = w[o];
            }
        }
        a
    }

    fn kriging(&self) -> Kriging {
        let a = self.kriging_weights();
        let mean_c = &a * DVector::from_column_slice(&self.x);
        let cov = &self.k_tt - &a * &self.k_ot;
        let cov = (&cov + cov.transpose()) * 0.5;
        Kriging {
            mean: mean_c.iter().zip(&self.mu_t).map(|(m, mu)| m + mu).collect(),
            cov,
        }
    }
}

/// Gaussian conditional mean and covariance at the targets (simple kriging
/// with the model's mean and covariance).
#[derive(Debug, Clone, PartialEq)]
pub struct Kriging {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

impl Kriging {
    pub fn sd(&self, t: usize) -> f64 {
        self.cov[(t, t)].max(0.0).sqrt()
    }
}

pub fn kriging(spec: &DependenceSpec, cond: &ConditioningSet) -> Result<Kriging> {
    Ok(Blocks::new(spec, cond)?.kriging())
}

/// Root of `grad(w) = target` with its iteration count and residual history.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleSolution {
    pub w: Vec<f64>,
    pub iters: usize,
    pub residual: f64,
    pub trace: Vec<f64>,
}

/// Damped Newton iteration for `grad(w) = target`.
///
/// Steps are halved until the candidate lies inside the strip (the closures
/// report this by returning an error) and the Euclidean residual decreases.
pub fn saddle_solve<G, H>(grad: G, hess: H, target: &[f64], start: &[f64]) -> Result<SaddleSolution>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
    H: Fn(&[f64]) -> Result<DMatrix<f64>>,
{
    let n = target.len();
    if start.len() != n {
        return Err(Error::Input(format!("start has length {} for a {n}-vector target", start.len())));
    }
    let resid = |g: &[f64]| -> Vec<f64> { g.iter().zip(target).map(|(a, b)| a - b).collect() };
    let sup = |r: &[f64]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let l2 = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();

    let mut w = start.to_vec();
    let mut g = match grad(&w) {
        Ok(g) => g,
        Err(_) => {
            w = vec![0.0; n];
            grad(&w)?
        }
    };
    let mut r = resid(&g);
    let mut trace = vec![sup(&r)];
    let goal = 1e-13 * (1.0 + sup(target));
    let mut iters = 0;
    while sup(&r) > goal && iters < MAX_NEWTON {
        iters += 1;
        let h = hess(&w)?;
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let step = match Cholesky::new(&h) {
            Ok(c) => c.solve(&neg),
            Err(_) => match h.clone().lu().solve(&DVector::from_vec(neg)) {
                Some(d) => d.iter().copied().collect(),
                None => break,
            },
        };
        let f0 = l2(&r);
        let mut lambda = 1.0;
        let mut accepted = false;
        while lambda > 1e-14 {
            let cand: Vec<f64> = w.iter().zip(&step).map(|(a, d)| a + lambda * d).collect();
            if let Ok(gc) = grad(&cand) {
                let rc = resid(&gc);
                if l2(&rc) < f0 {
                    w = cand;
                    g = gc;
                    r = rc;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        trace.push(sup(&r));
        if !accepted {
            break;
        }
    }
    let _ = &g;
    let residual = sup(&r);
    if residual <= SADDLE_TOLERANCE {
        Ok(SaddleSolution {
            w,
            iters,
            residual,
            trace,
        })
    } else {
        Err(Error::solver(
            format!("saddle equations not solved: residual {residual:e} after {iters} Newton steps"),
            trace,
        ))
    }
}

/// One evaluation of the conditional tail formula.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaddleResult {
    pub probability: f64,
    pub r: f64,
    pub q: f64,
    /// Solution of `∇K_Y(ŵ) = (a, x)`, target coordinate first.
    pub w_hat: Vec<f64>,
    /// Solution of `∇K_X(ŵ₋₁) = x`.
    pub w_hat_minus: Vec<f64>,
    /// Newton steps for the joint and the marginal equations.
    pub newton_iters: [usize; 2],
    /// Whether the value was interpolated across the near-mean band.
    pub interpolated: bool,
}

/// Conditional distribution of the field at a single target, given the
/// observations, via Skovgaard's double-saddlepoint formula
/// `Φ(r) + φ(r)(1/r − q)`.
#[derive(Debug, Clone)]
pub struct SaddlepointInterpolator {
    mix: GammaMixture,
    /// Covariance of `(X*, X_obs)`, target first.
    sigma_y: DMatrix<f64>,
    chol_y: Cholesky,
    sigma_x: DMatrix<f64>,
    x: Vec<f64>,
    mu_t: f64,
    w_minus: Vec<f64>,
    minus_iters: usize,
    /// `ŵ₋₁ᵀx − K_X(ŵ₋₁)`.
    legendre_x: f64,
    log_det_x: f64,
    krig_mean_c: f64,
    krig_sd: f64,
}

impl SaddlepointInterpolator {
    pub fn new(spec: &DependenceSpec, cond: &ConditioningSet) -> Result<Self> {
        if cond.n_targets() != 1 {
            return Err(Error::Input(format!(
                "saddlepoint CDF needs exactly one target, got {}",
                cond.n_targets()
            )));
        }
        let b = Blocks::new(spec, cond)?;
        let j = b.x.len();
        let mut sigma_y = DMatrix::zeros(j + 1, j + 1);
        sigma_y[(0, 0)] = b.k_tt[(0, 0)];
        for o in 0..j {
            sigma_y[(0, o + 1)] = b.k_ot[(o, 0)];
            sigma_y[(o + 1, 0)] = b.k_ot[(o, 0)];
        }
        sigma_y.view_mut((1, 1), (j, j)).copy_from(&b.sigma_oo);
        let chol_y = Cholesky::new(&sigma_y)?;
        let mix = spec.mixture().clone();

        let cgf_x = ScaleMixtureCgf::new(&b.sigma_oo, &mix);
        let start = b.chol_oo.solve(&b.x);
        let sol = saddle_solve(|w| cgf_x.grad(w), |w| cgf_x.hessian(w), &b.x, &start)?;
        let kx = cgf_x.eval(&sol.w)?;
        let hx = cgf_x.hessian(&sol.w)?;
        let log_det_x = Cholesky::new(&hx)?.log_det();
        let legendre_x = dot(&sol.w, &b.x) - kx;

        let krig = b.kriging();
        Ok(Self {
            sigma_x: b.sigma_oo.clone(),
            x: b.x.clone(),
            mu_t: b.mu_t[0],
            w_minus: sol.w,
            minus_iters: sol.iters,
            legendre_x,
            log_det_x,
            krig_mean_c: krig.mean[0] - b.mu_t[0],
            krig_sd: krig.sd(0),
            mix,
            sigma_y,
            chol_y,
        })
    }

    /// Gaussian conditional mean and standard deviation at the target.
    pub fn kriging(&self) -> (f64, f64) {
        (self.krig_mean_c + self.mu_t, self.krig_sd)
    }

    /// Closed-form Gaussian conditional CDF at `a`.
    pub fn gaussian_cdf(&self, a: f64) -> f64 {
        norm_cdf((a - self.mu_t - self.krig_mean_c) / self.krig_sd)
    }

    /// `Pr(X* ≤ a | X_obs = x)`.
    pub fn cdf(&self, a: f64) -> Result<SaddleResult> {
        let ac = a - self.mu_t;
        let res = self.raw(ac)?;
        if res.r.abs() >= NEAR_MEAN_BAND {
            return Ok(res);
        }
        // ŵ₁ = 0 exactly at the kriging mean; bracket the band around it.
        let a0 = self.krig_mean_c;
        let mut h = 1.5 * NEAR_MEAN_BAND * self.krig_sd * self.posterior_scale();
        let mut nodes;
        let mut tries = 0;
        loop {
            nodes = [
                (a0 - 2.0 * h, self.raw(a0 - 2.0 * h)?),
                (a0 - h, self.raw(a0 - h)?),
                (a0 + h, self.raw(a0 + h)?),
                (a0 + 2.0 * h, self.raw(a0 + 2.0 * h)?),
            ];
            if nodes[1].1.r.abs() >= NEAR_MEAN_BAND && nodes[2].1.r.abs() >= NEAR_MEAN_BAND {
                break;
            }
            h *= 1.5;
            tries += 1;
            if tries > 60 {
                return Err(Error::solver("could not bracket the near-mean band", vec![h]));
            }
        }
        let p = lagrange(&nodes.iter().map(|(t, r)| (*t, r.probability)).collect::<Vec<_>>(), ac);
        Ok(SaddleResult {
            probability: p.clamp(0.0, 1.0),
            interpolated: true,
            ..res
        })
    }

    /// Rough ratio of the saddlepoint scale to the kriging sd.
    fn posterior_scale(&self) -> f64 {
        let y = 0.5 * dot(&self.w_minus, &(&self.sigma_x * DVector::from_column_slice(&self.w_minus)).as_slice().to_vec());
        match self.mix.mgf(y) {
            Ok(m) => m.log_derivatives().1.sqrt().max(1e-3),
            Err(_) => 1.0,
        }
    }

    /// The tail formula without any band treatment; `ac` is centered.
    fn raw(&self, ac: f64) -> Result<SaddleResult> {
        let cgf_y = ScaleMixtureCgf::new(&self.sigma_y, &self.mix);
        let mut target = Vec::with_capacity(self.x.len() + 1);
        target.push(ac);
        target.extend_from_slice(&self.x);
        let start = self.chol_y.solve(&target);
        let sol = saddle_solve(|w| cgf_y.grad(w), |w| cgf_y.hessian(w), &target, &start)?;
        let (ky, _, hy) = cgf_y.all(&sol.w)?;
        let log_det_y = Cholesky::new(&hy)?.log_det();
        let d = dot(&sol.w, &target) - ky - self.legendre_x;
        let w1 = sol.w[0];
        let r = w1.signum() * (2.0 * d.max(0.0)).sqrt();
        let q = (0.5 * (self.log_det_x - log_det_y)).exp() / w1;
        let p = if r == 0.0 || w1 == 0.0 {
            0.5
        } else {
            norm_cdf(r) + norm_pdf(r) * (1.0 / r - q)
        };
        Ok(SaddleResult {
            probability: p.clamp(0.0, 1.0),
            r,
            q,
            w_hat: sol.w,
            w_hat_minus: self.w_minus.clone(),
            newton_iters: [sol.iters, self.minus_iters],
            interpolated: false,
        })
    }

    /// Smallest `a` with `cdf(a) ≥ p`, by bisection.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("probability {p} must lie in (0, 1)")));
        }
        let (m, s) = self.kriging();
        let spread = s * self.posterior_scale().max(1.0);
        let mut lo = m - 4.0 * spread;
        let mut hi = m + 4.0 * spread;
        let mut k = 0;
        while self.cdf(lo)?.probability > p {
            lo -= 4.0 * spread * 2f64.powi(k);
            k += 1;
            if k > 40 {
                return Err(Error::solver("quantile bracket failed below", vec![lo]));
            }
        }
        k = 0;
        while self.cdf(hi)?.probability < p {
            hi += 4.0 * spread * 2f64.powi(k);
            k += 1;
            if k > 40 {
                return Err(Error::solver("quantile bracket failed above", vec![hi]));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if hi - lo <= 1e-10 * (1.0 + mid.abs()) {
                break;
            }
            if self.cdf(mid)?.probability < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lagrange(nodes: &[(f64, f64)], t: f64) -> f64 {
    let mut out = 0.0;
    for (i, &(ti, yi)) in nodes.iter().enumerate() {
        let mut w = 1.0;
        for (j, &(tj, _)) in nodes.iter().enumerate() {
            if i != j {
                w *= (t - tj) / (ti - tj);
            }
        }
        out += w * yi;
    }
    out
}

/// `Pr(X* ≤ a | X_obs = x)` for a single target.
pub fn saddlepoint_cdf(spec: &DependenceSpec, cond: &ConditioningSet, a: f64) -> Result<SaddleResult> {
    SaddlepointInterpolator::new(spec, cond)?.cdf(a)
}

/// Conditional CDF over a grid of levels; fails if the values decrease by
/// more than `1e-6` anywhere.
pub fn saddlepoint_curve(spec: &DependenceSpec, cond: &ConditioningSet, levels: &[f64]) -> Result<Vec<SaddleResult>> {
    let interp = SaddlepointInterpolator::new(spec, cond)?;
    let mut sorted = levels.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted != levels {
        return Err(Error::Input("levels must be sorted increasingly".into()));
    }
    let out = levels
        .par_iter()
        .map(|&a| interp.cdf(a))
        .collect::<Result<Vec<_>>>()?;
    for (k, w) in out.windows(2).enumerate() {
        if w[1].probability < w[0].probability - 1e-6 {
            return Err(Error::solver(
                format!(
                    "conditional CDF decreases between levels {} and {}",
                    levels[k],
                    levels[k + 1]
                ),
                out.iter().map(|r| r.probability).collect(),
            ));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub burn_in: usize,
    pub samples: usize,
    pub proposal_sd: f64,
    /// Keep every `thin`-th state after burn-in.
    #[serde(default = "one")]
    pub thin: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            burn_in: 500,
            samples: 10_000,
            proposal_sd: 1.0,
            thin: 1,
            seed: 0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Input("MCMC needs at least one retained sample".into()));
        }
        if !(self.proposal_sd > 0.0 && self.proposal_sd.is_finite()) {
            return Err(Error::Input(format!("proposal sd must be positive, got {}", self.proposal_sd)));
        }
        if self.thin == 0 {
            return Err(Error::Input("thinning interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// Retained Metropolis states for `V` with chain diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VChain {
    pub samples: Vec<f64>,
    pub acceptance_rate: f64,
    pub ess: f64,
    /// Set when the effective sample size is below [`MIN_ESS`].
    pub flagged: bool,
}

impl VChain {
    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    pub fn sd(&self) -> f64 {
        let m = self.mean();
        let n = self.samples.len() as f64;
        (self.samples.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
    }
}

/// Random-walk Metropolis for `p(v | x) ∝ v^{−J/2} exp(−r²/(2v)) f_V(v)`.
///
/// Starts at `v = 1`; non-positive candidates are rejected (the chain holds).
pub fn sample_v_posterior_r2(mix: &GammaMixture, dim: usize, r2: f64, mcmc: &McmcConfig) -> Result<VChain> {
    mcmc.validate()?;
    if !(r2 >= 0.0 && r2.is_finite()) {
        return Err(Error::Input(format!("squared radius must be finite and non-negative, got {r2}")));
    }
    let half_j = 0.5 * dim as f64;
    let log_target = |v: f64| -half_j * v.ln() - 0.5 * r2 / v + mix.ln_density(v);
    let mut rng = ChaCha8Rng::seed_from_u64(mcmc.seed);
    let mut v = 1.0;
    let mut lp = log_target(v);
    let total = mcmc.burn_in + mcmc.samples * mcmc.thin;
    let mut accepted = 0usize;
    let mut samples = Vec::with_capacity(mcmc.samples);
    for it in 0..total {
        let eps: f64 = StandardNormal.sample(&mut rng);
        let u: f64 = rng.random();
        let cand = v + mcmc.proposal_sd * eps;
        if cand > 0.0 {
            let lc = log_target(cand);
            if u.ln() < lc - lp {
                v = cand;
                lp = lc;
                accepted += 1;
            }
        }
        if it >= mcmc.burn_in && (it - mcmc.burn_in) % mcmc.thin == mcmc.thin - 1 {
            samples.push(v);
        }
    }
    let ess = effective_sample_size(&samples);
    Ok(VChain {
        acceptance_rate: accepted as f64 / total as f64,
        flagged: ess < MIN_ESS,
        ess,
        samples,
    })
}

/// Posterior of `V` given observed values at a subset of the sites.
pub fn sample_v_posterior(
    spec: &DependenceSpec,
    obs_indices: &[usize],
    obs_values: &[f64],
    mcmc: &McmcConfig,
) -> Result<VChain> {
    let (r2, j) = observed_r2(spec, obs_indices, obs_values)?;
    sample_v_posterior_r2(spec.mixture(), j, r2, mcmc)
}

fn observed_r2(spec: &DependenceSpec, idx: &[usize], values: &[f64]) -> Result<(f64, usize)> {
    if idx.is_empty() || idx.len() != values.len() {
        return Err(Error::Input("observations must be non-empty and aligned with their indices".into()));
    }
    if let Some(&i) = idx.iter().find(|&&i| i >= spec.dim()) {
        return Err(Error::Input(format!("observation index {i} out of range")));
    }
    let sigma = DMatrix::from_fn(idx.len(), idx.len(), |a, b| spec.sigma()[(idx[a], idx[b])]);
    let x: Vec<f64> = idx.iter().zip(values).map(|(&i, v)| v - spec.mu()[i]).collect();
    Ok((Cholesky::new(&sigma)?.quad_form(&x), idx.len()))
}

/// Effective sample size from the initial positive sequence of
/// autocorrelation pair sums.
pub fn effective_sample_size(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return n as f64;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = xs.iter().map(|x| x - mean).collect();
    let var = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var == 0.0 {
        return 0.0;
    }
    let acf = |lag: usize| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 * var);
    let mut tau = -1.0;
    let mut k = 0;
    let mut prev = f64::INFINITY;
    while 2 * k + 1 < n {
        let pair = acf(2 * k) + acf(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        tau += 2.0 * pair;
        prev = pair;
        k += 1;
    }
    (n as f64 / tau.max(1.0 / n as f64)).min(n as f64)
}

/// Conditional ensemble together with the `V` chain that drove it.
#[derive(Debug, Clone)]
pub struct ConditionalEnsemble {
    pub samples: SampleMatrix,
    pub chain: VChain,
}

/// `B` conditional realizations at the targets: for each posterior draw
/// `v`, the latent Gaussian is conditioned on `x / √v` and rescaled.
///
/// A target coinciding with an observed site (nugget 0) reproduces the
/// observation exactly.
pub fn conditional_simulate(
    spec: &DependenceSpec,
    cond: &ConditioningSet,
    b: usize,
    mcmc: &McmcConfig,
) -> Result<ConditionalEnsemble> {
    let blocks = Blocks::new(spec, cond)?;
    let cfg = McmcConfig { samples: b, ..*mcmc };
    let r2 = blocks.chol_oo.quad_form(&blocks.x);
    let chain = sample_v_posterior_r2(spec.mixture(), blocks.x.len(), r2, &cfg)?;
    let krig = blocks.kriging();
    let scale = (0..blocks.k_tt.nrows()).map(|t| blocks.k_tt[(t, t)]).fold(0.0, f64::max);
    let factor = psd_factor(&krig.cov, scale)?;
    let m = cond.n_targets();
    let seed = mcmc.seed ^ 0x6A09_E667_F3BC_C908;
    let rows: Vec<Vec<f64>> = chain
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut rng = realization_rng(seed, i as u64);
            let eps: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z = &factor * DVector::from_vec(eps);
            let s = v.sqrt();
            (0..m).map(|t| krig.mean[t] + s * z[t]).collect()
        })
        .collect();
    let values = rows.into_iter().flatten().collect();
    let samples = SampleMatrix::new(b, m, values, Some(chain.samples.clone()))?
        .with_sites(cond.target_sites.clone())?;
    Ok(ConditionalEnsemble { samples, chain })
}

/// Lower factor of a positive semi-definite matrix; pivots below `1e-10 ·
/// scale` are treated as exact zeros.
fn psd_factor(a: &DMatrix<f64>, scale: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let tol = 1e-10 * scale.max(f64::MIN_POSITIVE);
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -tol {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        if d <= tol {
            continue;
        }
        let s = d.sqrt();
        l[(j, j)] = s;
        for i in j + 1..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / s;
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covmodel::{CovModel, MeanModel};
    use crate::special::norm_quantile;

    fn layout(j: usize, seed: u64) -> SiteSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coords: Vec<[f64; 2]> = Vec::new();
        while coords.len() < j {
            let c = [rng.random_range(0..64) as f64, rng.random_range(0..64) as f64];
            if !coords.contains(&c) {
                coords.push(c);
            }
        }
        SiteSet::new(coords).unwrap()
    }

    fn spec(mix: GammaMixture) -> DependenceSpec {
        DependenceSpec::new(
            layout(12, 4),
            CovModel::exponential(20.0, 1.0).unwrap(),
            MeanModel::constant(0.5),
            &[],
            mix,
        )
        .unwrap()
    }

    fn target(p: [f64; 2]) -> SiteSet {
        SiteSet::new(vec![p]).unwrap()
    }

    /// Gaussian conditional via an explicit inverse, independent of the
    /// library's kriging path.
    fn explicit_kriging(spec: &DependenceSpec, idx: &[usize], x: &[f64], t: [f64; 2]) -> (f64, f64) {
        let sites = spec.sites().unwrap();
        let model = spec.cov_model().unwrap();
        let s = DMatrix::from_fn(idx.len(), idx.len(), |a, b| spec.sigma()[(idx[a], idx[b])]);
        let inv = s.try_inverse().unwrap();
        let k = DVector::from_fn(idx.len(), |a, _| {
            let c = sites.coords()[idx[a]];
            model.value((c[0] - t[0]).hypot(c[1] - t[1]))
        });
        let xc = DVector::from_fn(idx.len(), |a, _| x[a] - 0.5);
        let w = &inv * &k;
        (0.5 + w.dot(&xc), (model.total_variance() - w.dot(&k)).sqrt())
    }

    #[test]
    fn extend_sigma_matches_union_assembly() {
        let sp = spec(GammaMixture::degenerate());
        let t = SiteSet::new(vec![[3.5, 7.25], [60.0, 1.0]]).unwrap();
        let cond = ConditioningSet::new(vec![0], vec![1.0], t.clone()).unwrap();
        let ext = extend_sigma(&sp, &cond).unwrap();
        let union = sp.sites().unwrap().union(&t, false).unwrap();
        let direct = cov_matrix(sp.cov_model().unwrap(), &union).unwrap();
        assert_eq!(ext, direct);
    }

    #[test]
    fn extend_sigma_far_target_decouples() {
        let sp = spec(GammaMixture::degenerate());
        let cond = ConditioningSet::new(vec![0], vec![1.0], target([1e6, 1e6])).unwrap();
        let ext = extend_sigma(&sp, &cond).unwrap();
        let j = sp.dim();
        assert!((0..j).all(|i| ext[(i, j)].abs() < 1e-300));
    }

    #[test]
    fn extend_sigma_rejects_colocated_target() {
        let sp = spec(GammaMixture::degenerate());
        let at = sp.sites().unwrap().coords()[2];
        let cond = ConditioningSet::new(vec![0], vec![1.0], SiteSet::with_coincident(vec![at]).unwrap()).unwrap();
        assert!(matches!(extend_sigma(&sp, &cond), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn conditioning_set_validation() {
        let t = target([0.5, 0.5]);
        assert!(ConditioningSet::new(vec![], vec![], t.clone()).is_err());
        assert!(ConditioningSet::new(vec![1, 1], vec![0.0, 0.0], t.clone()).is_err());
        assert!(ConditioningSet::new(vec![1], vec![f64::NAN], t.clone()).is_err());
        assert!(ConditioningSet::new(vec![1, 2], vec![0.0], t).is_err());
    }

    #[test]
    fn saddle_solve_linear_gradient_one_step() {
        let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 3.0]);
        let target = [0.3, -1.0, 2.0];
        let grad = |w: &[f64]| Ok((&sigma * DVector::from_column_slice(w)).iter().copied().collect());
        let hess = |_: &[f64]| Ok(sigma.clone());
        let sol = saddle_solve(grad, hess, &target, &[0.0; 3]).unwrap();
        assert_eq!(sol.iters, 1);
        let want = sigma.clone().try_inverse().unwrap() * DVector::from_column_slice(&target);
        for k in 0..3 {
            assert!((sol.w[k] - want[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn saddle_solve_zero_target() {
        let mix = GammaMixture::reference().normalized();
        let sigma = DMatrix::identity(4, 4);
        let cgf = ScaleMixtureCgf::new(&sigma, &mix);
        let sol = saddle_solve(|w| cgf.grad(w), |w| cgf.hessian(w), &[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(sol.w, vec![0.0; 4]);
    }

    #[test]
    fn saddle_solve_random_targets() {
        let mix = GammaMixture::reference().normalized();
        let sp = spec(mix.clone());
        let cgf = sp.cgf();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let t: Vec<f64> = (0..sp.dim()).map(|_| rng.random_range(-6.0..6.0)).collect();
            let sol = saddle_solve(|w| cgf.grad(w), |w| cgf.hessian(w), &t, &vec![0.0; t.len()]).unwrap();
            assert!(sol.residual <= SADDLE_TOLERANCE);
            assert!(sol.iters <= 50);
            assert!(cgf.in_strip(&sol.w));
        }
    }

    #[test]
    fn gaussian_exactness() {
        let sp = spec(GammaMixture::degenerate());
        let x = [0.9, -0.4, 1.7, 0.1, -1.2, 2.2];
        for n in [1usize, 2, 4, 6] {
            let idx: Vec<usize> = (0..n).collect();
            let t = [21.3, 40.8];
            let cond = ConditioningSet::new(idx.clone(), x[..n].to_vec(), target(t)).unwrap();
            let interp = SaddlepointInterpolator::new(&sp, &cond).unwrap();
            let (m, s) = explicit_kriging(&sp, &idx, &x[..n], t);
            for k in 0..=160 {
                let z = -4.0 + 0.05 * k as f64;
                let res = interp.cdf(m + z * s).unwrap();
                let err = (res.probability - norm_cdf(z)).abs();
                let tol = if res.r.abs() < 1e-3 { 1e-3 } else { 1e-6 };
                assert!(err <= tol, "n={n} z={z} err={err:e} r={}", res.r);
            }
        }
    }

    #[test]
    fn tail_limits() {
        let sp = spec(GammaMixture::reference().normalized());
        let cond = ConditioningSet::new(vec![0, 1, 2], vec![0.2, 1.1, -0.5], target([10.0, 10.0])).unwrap();
        let interp = SaddlepointInterpolator::new(&sp, &cond).unwrap();
        let (m, s) = interp.kriging();
        assert!(interp.cdf(m - 4.0 * s).unwrap().probability <= 1e-3);
        assert!(interp.cdf(m + 4.0 * s).unwrap().probability >= 0.999);
    }

    #[test]
    fn curve_is_monotone_and_quantiles_invert() {
        let sp = spec(GammaMixture::reference().normalized());
        let cond = ConditioningSet::new(vec![0, 3, 5, 7], vec![2.0, 2.5, 0.3, -1.0], target([30.0, 12.0])).unwrap();
        let interp = SaddlepointInterpolator::new(&sp, &cond).unwrap();
        let (m, s) = interp.kriging();
        let levels: Vec<f64> = (0..400).map(|k| m + s * (-5.0 + 0.025 * k as f64)).collect();
        let curve = saddlepoint_curve(&sp, &cond, &levels).unwrap();
        assert_eq!(curve.len(), levels.len());
        for p in [0.1, 0.5, 0.9, 0.999] {
            let q = interp.quantile(p).unwrap();
            assert!((interp.cdf(q).unwrap().probability - p).abs() < 1e-8);
        }
    }

    #[test]
    fn gaussian_quantiles_match_normal() {
        let sp = spec(GammaMixture::degenerate());
        let cond = ConditioningSet::new(vec![4, 5], vec![1.0, 3.0], target([5.0, 50.0])).unwrap();
        let interp = SaddlepointInterpolator::new(&sp, &cond).unwrap();
        let (m, s) = interp.kriging();
        for p in [0.8, 0.99, 0.999] {
            let q = interp.quantile(p).unwrap();
            assert!((q - (m + s * norm_quantile(p))).abs() < 1e-5 * s);
        }
    }

    /// `∫ v^{−J/2} e^{−r²/(2v)} f(v) g(v) dv` on (0, 60] by composite
    /// Simpson on a log grid.
    fn posterior_moments(mix: &GammaMixture, j: usize, r2: f64) -> (f64, f64) {
        let n = 40_000;
        let (lo, hi) = ((1e-6f64).ln(), (60.0f64).ln());
        let h = (hi - lo) / n as f64;
        let mut acc = [0.0; 3];
        for i in 0..=n {
            let u = lo + h * i as f64;
            let v = u.exp();
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            let dens = (-(j as f64) / 2.0 * v.ln() - r2 / (2.0 * v) + mix.ln_density(v)).exp() * v;
            for (k, a) in acc.iter_mut().enumerate() {
                *a += w * dens * v.powi(k as i32);
            }
        }
        let mean = acc[1] / acc[0];
        (mean, (acc[2] / acc[0] - mean * mean).sqrt())
    }

    #[test]
    fn posterior_matches_quadrature() {
        let mix = GammaMixture::reference().normalized();
        let mcmc = McmcConfig { samples: 100_000, seed: 3, ..Default::default() };
        for (j, r2) in [(30usize, 4.0 * 30.0), (30, 30.0), (6, 2.0)] {
            let chain = sample_v_posterior_r2(&mix, j, r2, &mcmc).unwrap();
            let (m, s) = posterior_moments(&mix, j, r2);
            assert!((chain.mean() - m).abs() / m < 0.05, "j={j} r2={r2}: {} vs {m}", chain.mean());
            assert!((chain.sd() - s).abs() / s < 0.1, "j={j} r2={r2}: {} vs {s}", chain.sd());
            assert!(!chain.flagged);
        }
    }

    #[test]
    fn concentrated_prior_dominates() {
        let mix = GammaMixture::single(1e6).unwrap();
        let mcmc = McmcConfig { samples: 2000, proposal_sd: 0.002, seed: 1, ..Default::default() };
        let chain = sample_v_posterior_r2(&mix, 30, 30.0 * 9.0, &mcmc).unwrap();
        assert!((chain.mean() - 1.0).abs() < 0.01);
    }

    #[test]
    fn chain_is_reproducible() {
        let sp = spec(GammaMixture::reference().normalized());
        let mcmc = McmcConfig { samples: 500, seed: 11, ..Default::default() };
        let a = sample_v_posterior(&sp, &[0, 1, 2], &[1.0, 2.0, 3.0], &mcmc).unwrap();
        let b = sample_v_posterior(&sp, &[0, 1, 2], &[1.0, 2.0, 3.0], &mcmc).unwrap();
        assert_eq!(a, b);
        assert!(a.acceptance_rate > 0.0 && a.acceptance_rate < 1.0);
    }

    #[test]
    fn flat_likelihood_preserves_prior() {
        let mix = GammaMixture::reference().normalized();
        let mcmc = McmcConfig { samples: 100_000, thin: 5, seed: 2, ..Default::default() };
        let chain = sample_v_posterior_r2(&mix, 0, 0.0, &mcmc).unwrap();
        // Chi-square over prior-probability deciles.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ref_draws: Vec<f64> = (0..200_000).map(|_| mix.sample(&mut rng)).collect();
        ref_draws.sort_by(f64::total_cmp);
        let edges: Vec<f64> = (1..10).map(|d| ref_draws[d * ref_draws.len() / 10]).collect();
        let mut counts = [0usize; 10];
        for v in &chain.samples {
            counts[edges.partition_point(|e| e < v)] += 1;
        }
        let n = chain.samples.len() as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - n / 10.0).powi(2) / (n / 10.0)).sum();
        // Autocorrelation inflates the statistic by roughly n / ESS.
        let inflation = n / chain.ess;
        assert!(stat / inflation < 27.88, "stat {stat}, inflation {inflation}");
    }

    #[test]
    fn ess_of_iid_and_sticky_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let iid: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e = effective_sample_size(&iid);
        assert!(e > 8000.0, "{e}");
        let sticky: Vec<f64> = (0..10_000).map(|i| (i / 1000) as f64).collect();
        assert!(effective_sample_size(&sticky) < MIN_ESS);
    }

    #[test]
    fn conditional_simulation_gaussian_mean() {
        let sp = spec(GammaMixture::degenerate());
        let t = SiteSet::new(vec![[12.0, 30.0], [33.0, 33.0]]).unwrap();
        let cond = ConditioningSet::new(vec![0, 1, 2, 3], vec![1.0, -0.5, 2.0, 0.0], t).unwrap();
        let mcmc = McmcConfig { proposal_sd: 1e-4, seed: 4, ..Default::default() };
        let ens = conditional_simulate(&sp, &cond, 20_000, &mcmc).unwrap();
        let krig = kriging(&sp, &cond).unwrap();
        for tcol in 0..2 {
            let col = ens.samples.column(tcol);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let se = krig.sd(tcol) / (col.len() as f64).sqrt();
            assert!((mean - krig.mean[tcol]).abs() < 3.0 * se, "target {tcol}");
        }
    }

    #[test]
    fn colocated_target_reproduces_observation() {
        let sp = spec(GammaMixture::reference().normalized());
        let at = sp.sites().unwrap().coords()[1];
        let cond = ConditioningSet::new(
            vec![0, 1, 2],
            vec![0.3, 1.7, -0.2],
            SiteSet::with_coincident(vec![at]).unwrap(),
        )
        .unwrap();
        let ens = conditional_simulate(&sp, &cond, 200, &McmcConfig::default()).unwrap();
        assert!(ens.samples.values().iter().all(|v| (v - 1.7).abs() < 1e-10));
    }
}
