use nalgebra::{Cholesky, DMatrix, Dyn};

use super::Matrix;
use crate::error::{Error, Result};

/// Cholesky factor of a symmetric positive-definite matrix.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    n: usize,
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn from_na(m: &DMatrix<f64>) -> Matrix {
    let mut out = Matrix::zeros(m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.set(r, c, m[(r, c)]);
        }
    }
    out
}

impl SpdFactor {
    pub fn new(a: &Matrix) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::shape("SPD factorization needs a square matrix"));
        }
        if !a.is_finite() {
            return Err(Error::numeric("SPD factorization input is not finite"));
        }
        let chol = Cholesky::new(to_na(a))
            .ok_or_else(|| Error::numeric("matrix is not positive definite"))?;
        Ok(SpdFactor { chol, n: a.rows() })
    }

    /// Factor of `gram + lambda·I`.
    pub fn ridge(gram: &Matrix, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::numeric(format!("ridge coefficient {lambda} must be positive and finite")));
        }
        let mut a = gram.clone();
        for i in 0..a.rows().min(a.cols()) {
            a.set(i, i, a.get(i, i) + lambda);
        }
        SpdFactor::new(&a)
    }

    /// `A⁻¹ b`.
    pub fn solve_left(&self, b: &Matrix) -> Result<Matrix> {
        if b.rows() != self.n {
            return Err(Error::shape("solve_left: right-hand side rows differ"));
        }
        let x = self.chol.solve(&to_na(b));
        let x = from_na(&x);
        if !x.is_finite() {
            return Err(Error::numeric("SPD solve produced non-finite values"));
        }
        Ok(x)
    }

    /// `b A⁻¹` (A symmetric, so this is `(A⁻¹ bᵀ)ᵀ`).
    pub fn solve_right(&self, b: &Matrix) -> Result<Matrix> {
        if b.cols() != self.n {
            return Err(Error::shape("solve_right: right-hand side columns differ"));
        }
        Ok(self.solve_left(&b.transpose())?.transpose())
    }
}
