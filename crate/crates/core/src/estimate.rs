//! Moment-based estimation: Gaussian maximum likelihood for the covariance
//! function, Mahalanobis radii, moment estimators of `V`, and constrained
//! method-of-moments fitting of the gamma mixture.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covmodel::{cov_matrix, Cholesky, CovKind, CovModel, SiteSet};
use crate::error::{Error, Result};
use crate::mixture::{moments_to_cumulants, CumulantVector, GammaMixture, MomentVector};
use crate::optim::{multistart, Bounds, Minimum, NelderMeadOptions};
use crate::simulate::SampleMatrix;
use crate::special::rising_factorial;

pub const MAX_SHAPE: f64 = 1e9;
pub const MIN_SCALE: f64 = 1e-12;
const MIN_SHAPE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            restarts: 16,
            max_iters: 40_000,
            tol: 1e-14,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    /// Highest moment order `K` used for the mixture fit.
    pub k: usize,
    /// Number of gamma components `S`.
    pub s: usize,
    pub optimizer: OptimizerConfig,
    pub cov_kind: CovKind,
    /// Seed for the random multistart points.
    pub seed: u64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            k: 5,
            s: 5,
            optimizer: OptimizerConfig::default(),
            cov_kind: CovKind::PoweredExponential,
            seed: 0,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.k) {
            return Err(Error::Input(format!("moment order K must lie in 2..=8, got {}", self.k)));
        }
        if !(1..=8).contains(&self.s) {
            return Err(Error::Input(format!("mixture size S must lie in 1..=8, got {}", self.s)));
        }
        if self.optimizer.restarts == 0 {
            return Err(Error::Input("at least one optimizer start is required".into()));
        }
        Ok(())
    }

    fn nm_options(&self) -> NelderMeadOptions {
        NelderMeadOptions {
            max_iters: self.optimizer.max_iters,
            ftol: self.optimizer.tol,
            xtol: 1e-10,
            step: 0.1,
            restarts: 4,
        }
    }
}

/// Subtracts each column's sample mean.
pub fn standardize(data: &SampleMatrix) -> Result<SampleMatrix> {
    if data.nrows() < 2 {
        return Err(Error::Input("standardizing needs at least two rows".into()));
    }
    let means: Vec<f64> = (0..data.ncols())
        .map(|j| data.column(j).iter().sum::<f64>() / data.nrows() as f64)
        .collect();
    Ok(data.map_values(|_, j, v| v - means[j]))
}

/// Sample second-moment matrix `(1/n) Σ x_i x_iᵀ`.
fn second_moments(data: &SampleMatrix) -> DMatrix<f64> {
    let j = data.ncols();
    let x = DMatrix::from_row_slice(data.nrows(), j, data.values());
    (x.transpose() * &x) / data.nrows() as f64
}

/// Outcome of the covariance-function fit.
#[derive(Debug, Clone, Serialize)]
pub struct CovFit {
    pub model: CovModel,
    /// Gaussian log-likelihood per observation (additive constants dropped).
    pub loglik_per_obs: f64,
    pub converged: bool,
    pub starts: usize,
    pub warnings: Vec<String>,
}

struct CovParam {
    kind: CovKind,
}

impl CovParam {
    // Parameter vector: (ln θ₁, shape, ln σ₁², ln σ₀²); the shape is ln ν for Matérn.
    fn decode(&self, p: &[f64]) -> CovModel {
        let theta2 = match self.kind {
            CovKind::PoweredExponential => p[1],
            CovKind::Matern => p[1].exp(),
        };
        let nugget = p[3].exp();
        CovModel {
            kind: self.kind,
            theta1: p[0].exp(),
            theta2,
            sigma0sq: if nugget < 1e-10 { 0.0 } else { nugget },
            sigma1sq: p[2].exp(),
        }
    }
}

/// Maximum-likelihood fit of a zero-mean multivariate normal whose
/// covariance follows the given parametric family.
pub fn fit_cov_params(data: &SampleMatrix, sites: &SiteSet, kind: CovKind, cfg: &EstimationConfig) -> Result<CovFit> {
    let j = data.ncols();
    if sites.len() != j {
        return Err(Error::Input(format!("{} sites for {j} data columns", sites.len())));
    }
    let mut warnings = Vec::new();
    if data.nrows() <= j {
        warnings.push(format!(
            "only {} observations for {j} sites; the sample covariance is singular",
            data.nrows()
        ));
    }
    let s = second_moments(data);
    for k in 0..j {
        if !(s[(k, k)] > 0.0) {
            return Err(Error::Input(format!("column {k} has zero variance")));
        }
    }
    let var = (0..j).map(|k| s[(k, k)]).sum::<f64>() / j as f64;

    let mut dists: Vec<f64> = (0..j)
        .flat_map(|a| (0..a).map(move |b| (a, b)))
        .map(|(a, b)| sites.distance(a, b))
        .filter(|d| *d > 0.0)
        .collect();
    dists.sort_by(f64::total_cmp);
    let (dmin, dmed, dmax) = if dists.is_empty() {
        (1.0, 1.0, 1.0)
    } else {
        (dists[0], dists[dists.len() / 2], dists[dists.len() - 1])
    };

    let param = CovParam { kind };
    let n = data.nrows() as f64;
    let objective = |p: &[f64]| -> f64 {
        let model = param.decode(p);
        let Ok(sigma) = cov_matrix(&model, sites) else {
            return f64::INFINITY;
        };
        let Ok(chol) = Cholesky::new(&sigma) else {
            return f64::INFINITY;
        };
        // tr(Σ⁻¹ S) through column solves.
        let mut tr = 0.0;
        for c in 0..j {
            let col: Vec<f64> = s.column(c).iter().copied().collect();
            tr += chol.solve(&col)[c];
        }
        0.5 * (chol.log_det() + tr)
    };

    let (shape_lo, shape_hi, shape0) = match kind {
        CovKind::PoweredExponential => (0.05, 2.0, 1.0),
        CovKind::Matern => ((0.05f64).ln(), (20.0f64).ln(), (0.5f64).ln()),
    };
    let bounds = Bounds::new(
        vec![(dmin / 20.0).ln(), shape_lo, (var * 1e-3).ln(), (var * 1e-10).ln()],
        vec![(dmax * 20.0).ln(), shape_hi, (var * 10.0).ln(), (var * 2.0).ln()],
    );
    let mut starts = vec![
        vec![dmed.ln(), shape0, (0.9 * var).ln(), (0.1 * var).ln()],
        vec![(dmed * 0.2).ln(), shape0, (0.7 * var).ln(), (0.3 * var).ln()],
        vec![(dmax).ln(), shape0, var.ln(), (1e-4 * var).ln()],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0FF_EE00);
    while starts.len() < cfg.optimizer.restarts.max(3) {
        starts.push(
            (0..4)
                .map(|i| rng.random_range(bounds.lo[i]..=bounds.hi[i]))
                .collect(),
        );
    }
    starts.truncate(cfg.optimizer.restarts.max(1));
    let opts = NelderMeadOptions {
        max_iters: cfg.optimizer.max_iters.min(5_000),
        ftol: 1e-12,
        xtol: 1e-8,
        step: 0.05,
        restarts: 2,
    };
    let results = multistart(&objective, &starts, &bounds, &opts);
    let best = pick_best(&results);
    if !best.f.is_finite() {
        return Err(Error::solver(
            "covariance likelihood could not be evaluated at any start",
            results.iter().map(|m| m.f).collect(),
        ));
    }
    let model = param.decode(&best.x);
    model.validate()?;
    let _ = n;
    Ok(CovFit {
        model,
        loglik_per_obs: -best.f,
        converged: best.converged,
        starts: starts.len(),
        warnings,
    })
}

fn pick_best(results: &[Minimum]) -> &Minimum {
    results
        .iter()
        .min_by(|a, b| a.f.total_cmp(&b.f))
        .expect("at least one start")
}

/// `r²_i = x_i Σ⁻¹ x_iᵀ` through triangular solves.
pub fn mahalanobis_r2(data: &SampleMatrix, sigma: &DMatrix<f64>) -> Result<Vec<f64>> {
    if sigma.nrows() != data.ncols() {
        return Err(Error::Input(format!(
            "{}x{} covariance for {} data columns",
            sigma.nrows(),
            sigma.ncols(),
            data.ncols()
        )));
    }
    let chol = Cholesky::new(sigma)?;
    Ok(data.rows().map(|r| chol.quad_form(r)).collect())
}

/// `ϑ̂_k = (1/n) Σ (r²_i)^k` for `k = 1..=order`.
pub fn r2_power_means(r2: &[f64], order: usize) -> Vec<f64> {
    let n = r2.len() as f64;
    (1..=order as i32)
        .map(|k| r2.iter().map(|r| r.powi(k)).sum::<f64>() / n)
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentEstimate {
    /// `m̂_1..m̂_K`, with `m̂_1 = 1`.
    pub m_hat: MomentVector,
    /// `ϑ̂_1 / J`, the first-moment estimate before normalization.
    pub raw_m1: f64,
    /// Factor `mean(r²)/J` divided out of the radii.
    pub scale: f64,
}

/// `m̂_k = Γ(J/2) / (2^k Γ(k + J/2)) · ϑ̂_k`, after rescaling the radii so
/// that `m̂_1 = 1`.
pub fn estimate_m(r2: &[f64], dim: usize, order: usize) -> Result<MomentEstimate> {
    if order < 2 {
        return Err(Error::Input("moment order K must be at least 2".into()));
    }
    if r2.is_empty() || dim == 0 {
        return Err(Error::Input("need at least one radius and a positive dimension".into()));
    }
    if r2.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::Input("squared radii must be finite and non-negative".into()));
    }
    let half = dim as f64 / 2.0;
    let theta = r2_power_means(r2, order);
    let raw_m1 = theta[0] / (2.0 * half);
    if !(raw_m1 > 0.0) {
        return Err(Error::Input("all squared radii are zero".into()));
    }
    let m_hat = theta
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let k = (i + 1) as u32;
            t / raw_m1.powi(k as i32) / (2f64.powi(k as i32) * rising_factorial(half, k))
        })
        .collect::<Vec<_>>();
    let mut m_hat = m_hat;
    m_hat[0] = 1.0;
    Ok(MomentEstimate {
        m_hat: MomentVector(m_hat),
        raw_m1,
        scale: raw_m1,
    })
}

/// Fitted mixture and its constrained least-squares residual.
#[derive(Debug, Clone, Serialize)]
pub struct MixtureFit {
    pub mix: GammaMixture,
    /// `Σ_{k=2..K} (m̂_k − m_k(fit))²`.
    pub residual: f64,
    pub fitted_moments: MomentVector,
    pub effective_components: usize,
    pub starts: usize,
}

/// Unconstrained coordinates for an `S`-component mixture with unit mean:
/// softmax logits for the weights, `ln α_s`, and relative component means
/// `ln u_s` (the scales follow as `β_s = u_s / (α_s Σ π_t u_t)`).
struct MixParam {
    s: usize,
}

impl MixParam {
    fn dim(&self) -> usize {
        3 * self.s
    }

    fn bounds(&self) -> Bounds {
        let s = self.s;
        let mut lo = vec![-30.0; s];
        let mut hi = vec![30.0; s];
        lo.extend(std::iter::repeat_n(MIN_SHAPE.ln(), s));
        hi.extend(std::iter::repeat_n(MAX_SHAPE.ln(), s));
        lo.extend(std::iter::repeat_n(-8.0, s));
        hi.extend(std::iter::repeat_n(8.0, s));
        Bounds::new(lo, hi)
    }

    /// `(weights, shapes, scales)`, components sorted by decreasing weight.
    fn decode(&self, p: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let s = self.s;
        let zmax = p[..s].iter().copied().fold(f64::MIN, f64::max);
        let ez: Vec<f64> = p[..s].iter().map(|z| (z - zmax).exp()).collect();
        let total: f64 = ez.iter().sum();
        let mut comps: Vec<(f64, f64, f64)> = (0..s)
            .map(|i| (ez[i] / total, p[s + i].exp().min(MAX_SHAPE), p[2 * s + i].exp()))
            .collect();
        comps.sort_by(|a, b| b.0.total_cmp(&a.0));
        let w_rest: f64 = comps[..s - 1].iter().map(|c| c.0).sum();
        comps[s - 1].0 = (1.0 - w_rest).max(0.0);
        let norm: f64 = comps.iter().map(|c| c.0 * c.2).sum();
        let weights = comps.iter().map(|c| c.0).collect();
        let shapes = comps.iter().map(|c| c.1).collect();
        let scales = comps.iter().map(|c| (c.2 / (c.1 * norm)).max(MIN_SCALE)).collect();
        (weights, shapes, scales)
    }
}

fn mixture_moment(w: &[f64], a: &[f64], b: &[f64], k: u32) -> f64 {
    (0..w.len())
        .map(|s| w[s] * b[s].powi(k as i32) * rising_factorial(a[s], k))
        .sum()
}

fn moment_residual(m_hat: &MomentVector, w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    (2..=m_hat.order())
        .map(|k| {
            let d = m_hat.get(k) - mixture_moment(w, a, b, k as u32);
            d * d
        })
        .sum()
}

/// Method-of-moments fit of an `S`-component gamma mixture with `E(V) = 1`.
///
/// The unit-mean constraint, the simplex and the weight ordering are
/// built into the parametrization, so every candidate is feasible.
pub fn fit_mixture_moments(m_hat: &MomentVector, s: usize, cfg: &EstimationConfig) -> Result<MixtureFit> {
    if m_hat.order() < 2 {
        return Err(Error::Input("need at least two moments".into()));
    }
    if !(1..=8).contains(&s) {
        return Err(Error::Input(format!("mixture size S must lie in 1..=8, got {s}")));
    }
    if m_hat.0.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
        return Err(Error::Input("moment estimates must be positive".into()));
    }
    let param = MixParam { s };
    let bounds = param.bounds();
    let objective = |p: &[f64]| {
        let (w, a, b) = param.decode(p);
        moment_residual(m_hat, &w, &a, &b)
    };

    // Deterministic starts: a single concentrated component matching m̂₂,
    // then random points.
    let var = (m_hat.get(2) - 1.0).max(1e-6);
    let mut first = vec![0.0; param.dim()];
    for i in 0..s {
        first[i] = -(i as f64);
        first[s + i] = (1.0 / var).ln().clamp(MIN_SHAPE.ln(), MAX_SHAPE.ln()) - i as f64;
        first[2 * s + i] = 0.5 * i as f64;
    }
    let mut starts = vec![first];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_FA11);
    while starts.len() < cfg.optimizer.restarts {
        let mut p = Vec::with_capacity(param.dim());
        p.extend((0..s).map(|_| rng.random_range(-3.0..3.0)));
        p.extend((0..s).map(|_| rng.random_range(-1.0..6.0)));
        p.extend((0..s).map(|_| rng.random_range(-1.5..1.5)));
        starts.push(p);
    }
    let results = multistart(&objective, &starts, &bounds, &cfg.nm_options());

    // Deterministic reduction: lowest residual; near-ties go to fewer
    // effective components, then lexicographically smaller parameters.
    let mut candidates: Vec<(f64, usize, Vec<f64>)> = results
        .iter()
        .map(|m| {
            let (w, a, b) = param.decode(&m.x);
            let eff = w.iter().filter(|&&x| x > 1e-8).count();
            let key: Vec<f64> = w.iter().chain(&a).chain(&b).copied().collect();
            (m.f, eff, key)
        })
        .collect();
    candidates.sort_by(|x, y| {
        let tie = (x.0 - y.0).abs() <= 1e-12 * (1.0 + x.0.abs().max(y.0.abs()));
        if tie {
            x.1.cmp(&y.1).then_with(|| {
                x.2.iter()
                    .zip(&y.2)
                    .map(|(a, b)| a.total_cmp(b))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        } else {
            x.0.total_cmp(&y.0)
        }
    });
    let (residual, eff, key) = candidates.into_iter().next().expect("at least one start");
    if !residual.is_finite() {
        return Err(Error::Optimization("no start produced a finite moment residual".into()));
    }
    let w = key[..s].to_vec();
    let a = key[s..2 * s].to_vec();
    let b = key[2 * s..].to_vec();
    let mix = GammaMixture::new(w, a, b).map_err(|e| {
        Error::Optimization(format!("best point (residual {residual:e}) violates the constraints: {e}"))
    })?;
    let fitted_moments = mix.moments(m_hat.order());
    Ok(MixtureFit {
        mix,
        residual,
        fitted_moments,
        effective_components: eff,
        starts: starts.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimationDiagnostics {
    pub n: usize,
    pub dim: usize,
    pub cov_loglik_per_obs: f64,
    pub cov_converged: bool,
    pub r2_scale: f64,
    pub mixture_effective_components: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimationResult {
    pub cov: CovModel,
    pub mix: GammaMixture,
    pub m_hat: MomentVector,
    pub c_hat: CumulantVector,
    pub residual: f64,
    pub diagnostics: EstimationDiagnostics,
}

/// Centering, covariance fit, radii, moment estimates and mixture fit, in
/// that order. The marginal transform is the identity.
pub fn estimate_all(data: &SampleMatrix, sites: &SiteSet, cfg: &EstimationConfig) -> Result<EstimationResult> {
    cfg.validate()?;
    let centered = standardize(data)?;
    let cov_fit = fit_cov_params(&centered, sites, cfg.cov_kind, cfg)?;
    let sigma = cov_matrix(&cov_fit.model, sites)?;
    let r2 = mahalanobis_r2(&centered, &sigma)?;
    let est = estimate_m(&r2, sites.len(), cfg.k)?;
    let c_hat = moments_to_cumulants(&est.m_hat)?;
    let fit = fit_mixture_moments(&est.m_hat, cfg.s, cfg)?;
    Ok(EstimationResult {
        cov: cov_fit.model,
        mix: fit.mix,
        m_hat: est.m_hat,
        c_hat,
        residual: fit.residual,
        diagnostics: EstimationDiagnostics {
            n: data.nrows(),
            dim: data.ncols(),
            cov_loglik_per_obs: cov_fit.loglik_per_obs,
            cov_converged: cov_fit.converged,
            r2_scale: est.scale,
            mixture_effective_components: fit.effective_components,
            warnings: cov_fit.warnings,
        },
    })
}
