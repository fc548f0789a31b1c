//! Symmetric positive-definite solves shared by the shadowing sampler and
//! the MMSE estimator.

use faer::prelude::*;
use faer::Side;

use crate::error::{Error, Result};

/// Relative diagonal jitter applied on the single retry.
pub const JITTER: f64 = 1e-8;

/// Cholesky factor `C = L Lᵀ` of a covariance matrix.
pub struct SpdFactor {
    llt: faer::linalg::solvers::Llt<f64>,
    jittered: bool,
}

impl SpdFactor {
    /// Factors `matrix`. On failure the diagonal is raised by `JITTER · scale`
    /// and the factorization retried once.
    pub fn new(mut matrix: Mat<f64>, scale: f64) -> Result<Self> {
        if let Ok(llt) = matrix.llt(Side::Lower) {
            return Ok(SpdFactor { llt, jittered: false });
        }
        let bump = JITTER * scale.abs().max(f64::MIN_POSITIVE);
        for i in 0..matrix.nrows() {
            matrix[(i, i)] += bump;
        }
        matrix.llt(Side::Lower).map(|llt| SpdFactor { llt, jittered: true }).map_err(|_| Error::NotPositiveDefinite)
    }

    /// Builds the `n × n` matrix from `entry(i, j)` (only the lower triangle is read).
    pub fn from_fn(n: usize, scale: f64, entry: impl Fn(usize, usize) -> f64) -> Result<Self> {
        Self::new(Mat::from_fn(n, n, entry), scale)
    }

    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    pub fn jittered(&self) -> bool {
        self.jittered
    }

    /// Solves `C x = rhs`.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = Mat::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        self.llt.solve_in_place(x.as_mut());
        (0..rhs.len()).map(|i| x[(i, 0)]).collect()
    }

    /// Lower-triangular factor `L`.
    pub fn lower(&self) -> MatRef<'_, f64> {
        self.llt.L()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        // [[4, 2], [2, 3]] x = [2, 1] -> x = [0.5, 0]
        let m = [[4.0, 2.0], [2.0, 3.0]];
        let f = SpdFactor::from_fn(2, 1.0, |i, j| m[i][j]).unwrap();
        let x = f.solve(&[2.0, 1.0]);
        assert!((x[0] - 0.5).abs() < 1e-14 && x[1].abs() < 1e-14);
        assert!(!f.jittered());
    }

    #[test]
    fn singular_matrix_is_rescued_by_jitter() {
        // rank one: all ones
        let f = SpdFactor::from_fn(3, 1.0, |_, _| 1.0).unwrap();
        assert!(f.jittered());
    }

    #[test]
    fn indefinite_matrix_fails() {
        let m = [[1.0, 0.0], [0.0, -1.0]];
        assert!(matches!(SpdFactor::from_fn(2, 1.0, |i, j| m[i][j]), Err(Error::NotPositiveDefinite)));
    }
}
