use super::Matrix;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, point: &Matrix, eps: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!("finite difference step must be positive, got {eps}")));
    }
    let mut grad = Matrix::zeros(point.rows(), point.cols());
    let mut x = point.clone();
    for i in 0..point.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let plus = f(&x)?;
        x.data_mut()[i] = orig - eps;
        let minus = f(&x)?;
        x.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!(
                "function is not finite near coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Central differences restricted to selected flat coordinates of `point`.
pub fn finite_diff_coords<F>(mut f: F, point: &Matrix, coords: &[usize], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    let mut x = point.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + eps;
            let plus = f(&x)?;
            x.data_mut()[i] = orig - eps;
            let minus = f(&x)?;
            x.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::numeric(format!("function is not finite near coordinate {i}")));
            }
            Ok((plus - minus) / (2.0 * eps))
        })
        .collect()
}
