//! Regularized least squares through a Cholesky factorization.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

/// Relative pivot threshold below which the system is treated as singular.
const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("regularization must be a finite non-negative number, got {0}")]
    Gamma(f64),
    #[error("singular system: pivot {pivot:e} at column {column}")]
    Singular { column: usize, pivot: f64 },
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    lower: Array2<f64>,
}

impl Cholesky {
    pub fn factor(a: ArrayView2<f64>) -> Result<Self, SolveError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(SolveError::Shape(format!("matrix is {}×{}, expected square", n, a.ncols())));
        }
        let scale = (0..n).map(|i| a[[i, i]].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut d = a[[j, j]];
            for k in 0..j {
                d -= l[[j, k]] * l[[j, k]];
            }
            if !(d > PIVOT_TOL * scale) {
                return Err(SolveError::Singular { column: j, pivot: d });
            }
            let djj = d.sqrt();
            l[[j, j]] = djj;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / djj;
            }
        }
        Ok(Self { lower: l })
    }

    /// Solves `A·X = B` column by column.
    pub fn solve(&self, b: ArrayView2<f64>) -> Result<Array2<f64>, SolveError> {
        let n = self.lower.nrows();
        if b.nrows() != n {
            return Err(SolveError::Shape(format!("right-hand side has {} rows, expected {n}", b.nrows())));
        }
        let l = &self.lower;
        let mut x = b.to_owned();
        for c in 0..x.ncols() {
            for i in 0..n {
                let mut s = x[[i, c]];
                for k in 0..i {
                    s -= l[[i, k]] * x[[k, c]];
                }
                x[[i, c]] = s / l[[i, i]];
            }
            for i in (0..n).rev() {
                let mut s = x[[i, c]];
                for k in (i + 1)..n {
                    s -= l[[k, i]] * x[[k, c]];
                }
                x[[i, c]] = s / l[[i, i]];
            }
        }
        Ok(x)
    }
}

/// `W = (a0 + γI)⁻¹ a1` for symmetric positive semidefinite `a0`.
pub fn ridge_solve(a0: ArrayView2<f64>, a1: ArrayView2<f64>, gamma: f64) -> Result<Array2<f64>, SolveError> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(SolveError::Gamma(gamma));
    }
    let p = a0.nrows();
    if a0.ncols() != p {
        return Err(SolveError::Shape(format!("a0 is {}×{}, expected square", p, a0.ncols())));
    }
    if a1.nrows() != p {
        return Err(SolveError::Shape(format!("a1 has {} rows, a0 has {p}", a1.nrows())));
    }
    let mut system = a0.to_owned();
    for i in 0..p {
        system[[i, i]] += gamma;
    }
    Cholesky::factor(system.view())?.solve(a1)
}

/// `‖(a0 + γI)·W − a1‖_F / ‖a1‖_F`.
pub fn relative_residual(a0: ArrayView2<f64>, a1: ArrayView2<f64>, gamma: f64, w: ArrayView2<f64>) -> f64 {
    let mut r = a0.dot(&w);
    r.scaled_add(gamma, &w);
    r -= &a1;
    let num = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let den = a1.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}
