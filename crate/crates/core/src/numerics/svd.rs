//! Singular values via one-sided (Hestenes) Jacobi rotations.
//!
//! Only the spectrum is computed. The rotations are orthogonal, so the sum of
//! squared column norms (the squared Frobenius norm) is preserved up to
//! roundoff, and small singular values come out with absolute accuracy on the
//! order of `eps * sigma_1`, which is what the rank detector needs.

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Singular values in descending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SingularSpectrum(Vec<f64>);

impl SingularSpectrum {
    /// Sorts descending and validates non-negativity.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "singular values must be finite and non-negative, got {v}"
            )));
        }
        values.sort_by(|a, b| b.total_cmp(a));
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn largest(&self) -> f64 {
        self.0.first().copied().unwrap_or(0.0)
    }

    /// Count of values strictly above `rel * sigma_1`.
    pub fn numerical_rank(&self, rel: f64) -> usize {
        let cut = rel * self.largest();
        self.0.iter().filter(|&&v| v > cut).count()
    }
}

/// All `min(rows, cols)` singular values of `m`, descending.
pub fn singular_values(m: &Matrix) -> Result<SingularSpectrum> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::EmptyInput("singular values of an empty matrix".into()));
    }
    // Orthogonalize the columns of a tall matrix; transpose wide inputs.
    let tall = if m.rows() >= m.cols() { m.clone() } else { m.transpose() };
    let (n_rows, n_cols) = tall.shape();
    let mut cols: Vec<Vec<f64>> = (0..n_cols)
        .map(|c| (0..n_rows).map(|r| tall.get(r, c)).collect())
        .collect();
    let mut sq: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();

    let tol = f64::EPSILON * (n_rows as f64).sqrt();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n_cols {
            for j in (i + 1)..n_cols {
                let (alpha, beta) = (sq[i], sq[j]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(j);
                let (ci, cj) = (&mut left[i], &mut right[0]);
                for (a, b) in ci.iter_mut().zip(cj.iter_mut()) {
                    let (x, y) = (*a, *b);
                    *a = c * x - s * y;
                    *b = s * x + c * y;
                }
                sq[i] = ci.iter().map(|v| v * v).sum();
                sq[j] = cj.iter().map(|v| v * v).sum();
            }
        }
        if !rotated {
            break;
        }
    }
    SingularSpectrum::new(sq.into_iter().map(f64::sqrt).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{random_matrix, SeededRng};

    #[test]
    fn identity_and_diagonal() {
        let s = singular_values(&Matrix::identity(3)).unwrap();
        assert_eq!(s.values(), &[1.0, 1.0, 1.0]);
        let s = singular_values(&Matrix::from_diag(&[3.0, 5.0])).unwrap();
        assert_eq!(s.values(), &[5.0, 3.0]);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(matches!(
            singular_values(&Matrix::zeros(0, 3)),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn frobenius_and_transpose() {
        let mut rng = SeededRng::new(11, 0);
        for (r, c) in [(8, 6), (6, 8), (1, 5), (5, 1), (32, 64)] {
            let m = random_matrix(&mut rng, r, c, 1.0).unwrap();
            let s = singular_values(&m).unwrap();
            assert_eq!(s.len(), r.min(c));
            let sum_sq: f64 = s.values().iter().map(|v| v * v).sum();
            let fro = m.frobenius_norm().powi(2);
            assert!(((sum_sq - fro) / fro).abs() < 1e-10);
            let st = singular_values(&m.transpose()).unwrap();
            for (a, b) in s.values().iter().zip(st.values()) {
                assert!((a - b).abs() <= 1e-10 * s.largest());
            }
        }
    }

    #[test]
    fn low_rank_product_has_exact_numerical_rank() {
        let mut rng = SeededRng::new(5, 1);
        for s in [1, 3, 8] {
            let a = random_matrix(&mut rng, 40, s, 1.0).unwrap();
            let b = random_matrix(&mut rng, s, 30, 1.0).unwrap();
            let spec = singular_values(&a.matmul(&b).unwrap()).unwrap();
            assert_eq!(spec.numerical_rank(1e-8), s);
        }
    }

    #[test]
    fn spectrum_rejects_negative() {
        assert!(SingularSpectrum::new(vec![1.0, -1.0]).is_err());
        assert_eq!(SingularSpectrum::new(vec![1.0, 3.0]).unwrap().values(), &[3.0, 1.0]);
    }
}
