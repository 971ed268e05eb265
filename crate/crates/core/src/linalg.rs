//! Regularized linear least squares through the normal equations.
//!
//! Every basis fit in the crate has the shape
//!
//! ```text
//! minimize ‖B c − y‖² + Σ_k r_k c_k²
//! ```
//!
//! with a diagonal, non-negative penalty `r`. The design matrix is fixed for
//! a whole batch of voxels, so the solve operator `(BᵀB + R)⁻¹ Bᵀ` is built
//! once and then applied to every right-hand side.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Largest normal-equation condition number accepted for an unregularized fit.
pub const MAX_CONDITION: f64 = 1e12;

/// A precomputed regularized least-squares solve operator.
#[derive(Debug, Clone)]
pub struct LinearFit {
    design: DMatrix<f64>,
    operator: DMatrix<f64>,
}

impl LinearFit {
    /// Factor `BᵀB + diag(penalty)` by Cholesky.
    ///
    /// When every penalty entry is zero, the condition number of `BᵀB` is
    /// checked against [`MAX_CONDITION`] first.
    pub fn new(design: DMatrix<f64>, penalty: &[f64]) -> Result<Self> {
        let ncols = design.ncols();
        if penalty.len() != ncols {
            return Err(Error::LengthMismatch {
                expected: ncols,
                found: penalty.len(),
            });
        }
        if penalty.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidArgument(
                "penalty weights must be finite and non-negative".into(),
            ));
        }
        let mut normal = design.transpose() * &design;
        let unregularized = penalty.iter().all(|&p| p == 0.0);
        if unregularized {
            let condition = condition_number(&normal);
            if !(condition <= MAX_CONDITION) {
                return Err(Error::Singular { condition });
            }
        }
        for (k, &p) in penalty.iter().enumerate() {
            normal[(k, k)] += p;
        }
        let chol = normal.clone().cholesky().ok_or_else(|| Error::Singular {
            condition: condition_number(&normal),
        })?;
        let operator = chol.solve(&design.transpose());
        Ok(Self { design, operator })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    /// Coefficient-by-sample solve operator.
    pub fn operator(&self) -> &DMatrix<f64> {
        &self.operator
    }

    pub fn n_samples(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_coeffs(&self) -> usize {
        self.design.ncols()
    }

    pub fn solve(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.n_samples() {
            return Err(Error::LengthMismatch {
                expected: self.n_samples(),
                found: values.len(),
            });
        }
        let y = DVector::from_column_slice(values);
        Ok((&self.operator * y).as_slice().to_vec())
    }

    /// Fit many voxels at once. `values` is samples × voxels; the result is
    /// coefficients × voxels.
    pub fn solve_columns(&self, values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if values.nrows() != self.n_samples() {
            return Err(Error::LengthMismatch {
                expected: self.n_samples(),
                found: values.nrows(),
            });
        }
        Ok(&self.operator * values)
    }
}

/// Ratio of extreme eigenvalues of a symmetric positive semi-definite matrix.
pub fn condition_number(sym: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(sym.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Neumaier-compensated sum in the iteration order of `values`.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_fit() {
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let fit = LinearFit::new(b, &[0.0, 0.0]).unwrap();
        let c = fit.solve(&[2.0, 5.0, 8.0]).unwrap();
        assert!((c[0] - 2.0).abs() < 1e-12);
        assert!((c[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_without_penalty_is_singular() {
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(
            LinearFit::new(b.clone(), &[0.0, 0.0]),
            Err(Error::Singular { .. })
        ));
        assert!(LinearFit::new(b, &[1e-6, 1e-6]).is_ok());
    }

    #[test]
    fn ridge_shrinks_toward_zero() {
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let fit = LinearFit::new(b, &[2.0]).unwrap();
        // (2 + 2) c = 2 + 2
        let c = fit.solve(&[1.0, 1.0]).unwrap();
        assert!((c[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let vals = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(vals), 2.0);
    }
}
