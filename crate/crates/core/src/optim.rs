//! Box-constrained Nelder–Mead with simplex restarts, plus a deterministic
//! multistart driver.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadOptions {
    pub max_iters: usize,
    /// Stop when the spread of simplex values falls below this.
    pub ftol: f64,
    /// ...and the simplex diameter below this.
    pub xtol: f64,
    /// Initial simplex edge, as a fraction of the box width (or absolute
    /// for unbounded coordinates).
    pub step: f64,
    /// Fresh simplices built around the incumbent after convergence.
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            ftol: 1e-14,
            xtol: 1e-10,
            step: 0.1,
            restarts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iters: usize,
    pub evals: usize,
    pub converged: bool,
    /// Best objective value after each restart.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(&hi).all(|(l, h)| l <= h), "empty box");
        Self { lo, hi }
    }

    pub fn unbounded(n: usize) -> Self {
        Self::new(vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for ((v, l), h) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*l, *h);
        }
    }

    fn width(&self, i: usize) -> f64 {
        let w = self.hi[i] - self.lo[i];
        if w.is_finite() {
            w
        } else {
            1.0
        }
    }
}

struct Counted<'a, F> {
    f: &'a F,
    evals: usize,
}

impl<F: Fn(&[f64]) -> f64> Counted<'_, F> {
    fn call(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

/// Minimizes `f` over the box starting from `x0`. Trial points are
/// projected onto the box.
pub fn nelder_mead<F>(f: &F, x0: &[f64], bounds: &Bounds, opts: &NelderMeadOptions) -> Minimum
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let mut obj = Counted { f, evals: 0 };
    let mut best = x0.to_vec();
    bounds.clamp(&mut best);
    let mut best_f = obj.call(&best);
    let mut iters = 0;
    let mut converged = false;
    let mut trace = Vec::new();

    for _round in 0..=opts.restarts {
        // Initial simplex around the incumbent; step away from a bound
        // towards the interior.
        let mut simplex: Vec<Vec<f64>> = vec![best.clone()];
        for i in 0..n {
            let mut p = best.clone();
            let h = opts.step * bounds.width(i);
            let h = if h == 0.0 { opts.step } else { h };
            p[i] = if p[i] + h <= bounds.hi[i] { p[i] + h } else { p[i] - h };
            bounds.clamp(&mut p);
            simplex.push(p);
        }
        let mut values: Vec<f64> = simplex.iter().map(|p| obj.call(p)).collect();
        let mut round_converged = false;

        while iters < opts.max_iters {
            iters += 1;
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();

            let spread = values[n] - values[0];
            let diam = simplex[1..]
                .iter()
                .map(|p| p.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if spread.abs() <= opts.ftol && diam <= opts.xtol {
                round_converged = true;
                break;
            }

            let centroid: Vec<f64> = (0..n)
                .map(|k| simplex[..n].iter().map(|p| p[k]).sum::<f64>() / n as f64)
                .collect();
            let along = |t: f64| {
                let mut p: Vec<f64> = centroid
                    .iter()
                    .zip(&simplex[n])
                    .map(|(c, w)| c + t * (c - w))
                    .collect();
                bounds.clamp(&mut p);
                p
            };

            let xr = along(1.0);
            let fr = obj.call(&xr);
            if fr < values[0] {
                let xe = along(2.0);
                let fe = obj.call(&xe);
                if fe < fr {
                    simplex[n] = xe;
                    values[n] = fe;
                } else {
                    simplex[n] = xr;
                    values[n] = fr;
                }
            } else if fr < values[n - 1] {
                simplex[n] = xr;
                values[n] = fr;
            } else {
                let (xc, fc) = if fr < values[n] {
                    let xc = along(0.5);
                    let fc = obj.call(&xc);
                    (xc, fc)
                } else {
                    let xc = along(-0.5);
                    let fc = obj.call(&xc);
                    (xc, fc)
                };
                if fc < values[n].min(fr) {
                    simplex[n] = xc;
                    values[n] = fc;
                } else {
                    for i in 1..=n {
                        let p: Vec<f64> = simplex[0]
                            .iter()
                            .zip(&simplex[i])
                            .map(|(b, x)| b + 0.5 * (x - b))
                            .collect();
                        values[i] = obj.call(&p);
                        simplex[i] = p;
                    }
                }
            }
        }

        let (ib, fb) = values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, v)| (i, *v))
            .unwrap();
        let improved = fb < best_f;
        if fb <= best_f {
            best = simplex[ib].clone();
            best_f = fb;
        }
        trace.push(best_f);
        converged = round_converged;
        if iters >= opts.max_iters || (round_converged && !improved && _round > 0) {
            break;
        }
    }

    Minimum {
        x: best,
        f: best_f,
        iters,
        evals: obj.evals,
        converged,
        trace,
    }
}

/// Runs [`nelder_mead`] from every start in parallel and returns all
/// results in start order.
pub fn multistart<F>(f: &F, starts: &[Vec<f64>], bounds: &Bounds, opts: &NelderMeadOptions) -> Vec<Minimum>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    starts
        .par_iter()
        .map(|x0| nelder_mead(f, x0, bounds, opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = nelder_mead(&f, &[-1.2, 1.0], &Bounds::unbounded(2), &NelderMeadOptions::default());
        assert!(m.f < 1e-12, "{m:?}");
        assert!((m.x[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn active_bound() {
        let f = |x: &[f64]| (x[0] + 3.0).powi(2) + (x[1] - 0.5).powi(2);
        let b = Bounds::new(vec![0.0, 0.0], vec![1.0, 1.0]);
        let m = nelder_mead(&f, &[0.7, 0.7], &b, &NelderMeadOptions::default());
        assert!(m.x[0].abs() < 1e-8 && (m.x[1] - 0.5).abs() < 1e-5, "{m:?}");
    }

    #[test]
    fn nan_is_rejected() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 2.0).powi(2) };
        let m = nelder_mead(&f, &[1.0], &Bounds::unbounded(1), &NelderMeadOptions::default());
        assert!((m.x[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn multistart_is_ordered() {
        let f = |x: &[f64]| (x[0] * x[0] - 1.0).powi(2);
        let starts = vec![vec![-2.0], vec![2.0]];
        let ms = multistart(&f, &starts, &Bounds::unbounded(1), &NelderMeadOptions::default());
        assert!(ms[0].x[0] < 0.0 && ms[1].x[0] > 0.0);
    }
}
