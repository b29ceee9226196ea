//! Dense Cholesky factorization and the triangular solves built on it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `L` of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factorizes `a = L Lᵀ`. Only the lower triangle of `a` is read.
    ///
    /// No jitter is ever added: a non-positive pivot is reported together
    /// with its index.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::Input(format!(
                "cholesky of non-square {}x{} matrix",
                n,
                a.ncols()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("matrix has non-finite entries".into()));
        }
        let mut l = a.lower_triangle();
        // Left-looking column algorithm; columns are contiguous in nalgebra.
        for j in 0..n {
            for k in 0..j {
                let ljk = l[(j, k)];
                if ljk == 0.0 {
                    continue;
                }
                let (left, mut right) = l.columns_range_pair_mut(k, j);
                let src = left.rows_range(j..n);
                let mut dst = right.rows_range_mut(j..n);
                dst.axpy(-ljk, &src, 1.0);
            }
            let pivot = l[(j, j)];
            // A pivot at rounding level of the original diagonal means the
            // matrix is singular to working precision.
            if !(pivot > 4.0 * n as f64 * f64::EPSILON * a[(j, j)].abs()) {
                return Err(Error::NotPositiveDefinite { pivot: j, value: pivot });
            }
            let d = pivot.sqrt();
            l.column_mut(j).rows_range_mut(j..n).scale_mut(1.0 / d);
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn into_l(self) -> DMatrix<f64> {
        self.l
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut y = b.to_vec();
        for j in 0..n {
            let yj = y[j] / self.l[(j, j)];
            y[j] = yj;
            if yj != 0.0 {
                let col = self.l.column(j);
                for i in j + 1..n {
                    y[i] -= yj * col[i];
                }
            }
        }
        y
    }

    /// Solves `Lᵀ x = y`.
    pub fn solve_upper(&self, y: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(y.len(), n);
        let mut x = y.to_vec();
        for j in (0..n).rev() {
            let col = self.l.column(j);
            let mut s = x[j];
            for i in j + 1..n {
                s -= col[i] * x[i];
            }
            x[j] = s / col[j];
        }
        x
    }

    /// Solves `A x = b` for the factorized `A`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// `xᵀ A⁻¹ x`, computed as `‖L⁻¹x‖²`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.solve_lower(x).iter().map(|v| v * v).sum()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// `L z` for a vector of the factor's dimension.
    pub fn mul_lower(&self, z: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(z.len(), n);
        let mut out = vec![0.0; n];
        for j in 0..n {
            let zj = z[j];
            if zj == 0.0 {
                continue;
            }
            let col = self.l.column(j);
            for i in j..n {
                out[i] += col[i] * zj;
            }
        }
        out
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut inv = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            inv.column_mut(j).copy_from(&DVector::from_vec(col));
        }
        inv
    }
}

/// Lower-triangular `L` with `L Lᵀ = matrix`.
pub fn cholesky_factor(matrix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::new(matrix).map(Cholesky::into_l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_factor_is_identity() {
        let l = cholesky_factor(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(l, DMatrix::identity(4, 4));
    }

    #[test]
    fn hand_computed_two_by_two() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let l = cholesky_factor(&a).unwrap();
        assert!((l[(0, 0)] - 2.0).abs() < 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
        assert!((l[(1, 0)] - 1.0).abs() < 1e-15);
        assert!((l[(1, 1)] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn reports_failing_pivot() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        match Cholesky::new(&a) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 2),
            other => panic!("expected pivot failure, got {other:?}"),
        }
    }

    #[test]
    fn random_spd_reconstructs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for n in [1, 5, 40] {
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let spd = a.transpose() * &a + DMatrix::identity(n, n) * 1e-3;
            let chol = Cholesky::new(&spd).unwrap();
            let back = chol.l() * chol.l().transpose();
            let rel = (&back - &spd).norm() / spd.norm();
            assert!(rel <= 1e-10, "n={n} rel={rel}");

            let b: Vec<f64> = (0..n).map(|i| i as f64 - 1.5).collect();
            let x = chol.solve(&b);
            let resid = &spd * DVector::from_vec(x) - DVector::from_vec(b.clone());
            assert!(resid.norm() < 1e-8 * (1.0 + spd.norm()));
            let qf = chol.quad_form(&b);
            let direct = DVector::from_vec(b.clone()).dot(&(chol.inverse() * DVector::from_vec(b)));
            assert!((qf - direct).abs() <= 1e-8 * direct.abs().max(1.0));
        }
    }
}
