use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers follow the order of the
/// parameter list passed to [`Adam::step`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Adam {
            config,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::shape(format!("adam tensor {i} changed shape")));
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = beta1 * md[k] + (1.0 - beta1) * gk;
                vd[k] = beta2 * vd[k] + (1.0 - beta2) * gk * gk;
                let mhat = md[k] / bc1;
                let vhat = vd[k] / bc2;
                pd[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm across a set of tensors.
pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(Matrix::squared_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Matrix::from_rows(&[[1.0, -2.0]]);
        let g = Matrix::from_rows(&[[0.3, -5.0]]);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &[(1, 2)]);
        opt.step(&mut [&mut p], &[g]).unwrap();
        assert!((p.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p.get(0, 1) + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Matrix::from_rows(&[[3.0, -4.0]]);
        let mut opt = Adam::new(AdamConfig::with_lr(0.05), &[(1, 2)]);
        for _ in 0..2000 {
            let g = p.scale(2.0);
            opt.step(&mut [&mut p], &[g]).unwrap();
        }
        assert!(p.frobenius_norm() < 1e-3, "{p:?}");
    }

    #[test]
    fn clipping_rescales_to_bound() {
        let mut g = vec![Matrix::from_rows(&[[6.0, 0.0]]), Matrix::from_rows(&[[0.0, 8.0]])];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 10.0).abs() < 1e-12);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        assert!((g[0].get(0, 0) - 0.6).abs() < 1e-12);

        let mut small = vec![Matrix::from_rows(&[[0.1]])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].get(0, 0), 0.1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Matrix::from_rows(&[[1.5, 2.5]]);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &[(1, 2)]);
        opt.step(&mut [&mut p], &[Matrix::zeros(1, 2)]).unwrap();
        assert_eq!(p, Matrix::from_rows(&[[1.5, 2.5]]));
    }
}
