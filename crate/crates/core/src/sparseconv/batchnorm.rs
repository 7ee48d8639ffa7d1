use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics over all active sites; running stats are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Running statistics of one batch-norm layer. The learnable scale and shift
/// live in the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
        }
    }

    /// Exponential moving average; the variance uses the unbiased estimate.
    pub fn update(&mut self, stats: &BatchStats) {
        let n = stats.count as f64;
        let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        let m = self.momentum;
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c] * unbias;
        }
    }

    pub fn round_to_f32(&mut self) {
        for v in self.running_mean.iter_mut().chain(self.running_var.iter_mut()) {
            *v = f64::from(*v as f32);
        }
    }
}

/// Per-channel mean and biased variance of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

pub fn batchnorm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, BnCache, BatchStats)> {
    let (n, c) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(Error::DimensionMismatch {
            expected: c,
            found: gamma.len(),
        });
    }
    let mut mean = vec![0.0; c];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(&[n, c]);
    let mut y = Tensor::zeros(&[n, c]);
    for r in 0..n {
        for k in 0..c {
            let h = (x.row(r)[k] - mean[k]) * inv_std[k];
            xhat.row_mut(r)[k] = h;
            y.row_mut(r)[k] = gamma.data()[k] * h + beta.data()[k];
        }
    }
    Ok((y, BnCache { xhat, inv_std }, BatchStats { mean, var, count: n }))
}

pub fn batchnorm_eval(x: &Tensor, gamma: &Tensor, beta: &Tensor, state: &BatchNormState) -> Result<Tensor> {
    let c = x.cols();
    if gamma.len() != c || state.running_mean.len() != c {
        return Err(Error::DimensionMismatch {
            expected: c,
            found: gamma.len(),
        });
    }
    let scale: Vec<f64> = (0..c)
        .map(|k| gamma.data()[k] / (state.running_var[k] + state.eps).sqrt())
        .collect();
    let mut y = x.clone();
    for r in 0..x.rows() {
        for (k, v) in y.row_mut(r).iter_mut().enumerate() {
            *v = (*v - state.running_mean[k]) * scale[k] + beta.data()[k];
        }
    }
    Ok(y)
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward(cache: &BnCache, gamma: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, c) = (cache.xhat.rows(), cache.xhat.cols());
    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    for r in 0..n {
        for k in 0..c {
            let g = grad_out.row(r)[k];
            g_beta[k] += g;
            g_gamma[k] += g * cache.xhat.row(r)[k];
        }
    }
    // With gx̂ = γ·g: Σgx̂ = γ·Σg and Σ(gx̂·x̂) = γ·Σ(g·x̂).
    let nf = n as f64;
    let mut g_in = Tensor::zeros(&[n, c]);
    for r in 0..n {
        for k in 0..c {
            let gh = gamma.data()[k] * grad_out.row(r)[k];
            let sum_gh = gamma.data()[k] * g_beta[k];
            let sum_ghx = gamma.data()[k] * g_gamma[k];
            g_in.row_mut(r)[k] = cache.inv_std[k] / nf * (nf * gh - sum_gh - cache.xhat.row(r)[k] * sum_ghx);
        }
    }
    (g_in, Tensor::vector(g_gamma), Tensor::vector(g_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::linear::normal_tensor;
    use crate::numcore::{finite_diff_grad, max_relative_error};
    use rand::SeedableRng;

    #[test]
    fn constant_channel_maps_to_zero() {
        let x = Tensor::matrix(3, 2, vec![5.0, 1.0, 5.0, 2.0, 5.0, 3.0]).unwrap();
        let (y, _, _) = batchnorm_train(&x, &Tensor::vector(vec![1.0, 1.0]), &Tensor::zeros(&[2]), 1e-5).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r)[0], 0.0);
        }
    }

    #[test]
    fn two_site_closed_form() {
        let eps = 1e-5;
        let x = Tensor::matrix(2, 1, vec![-1.0, 1.0]).unwrap();
        let (y, _, stats) = batchnorm_train(&x, &Tensor::vector(vec![1.0]), &Tensor::zeros(&[1]), eps).unwrap();
        let e = 1.0 / (1.0 + eps).sqrt();
        assert!((y.data()[0] + e).abs() < 1e-15);
        assert!((y.data()[1] - e).abs() < 1e-15);
        assert_eq!(stats.var, vec![1.0]);
    }

    #[test]
    fn single_site_is_degenerate() {
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let r = batchnorm_train(&x, &Tensor::vector(vec![1.0, 1.0]), &Tensor::zeros(&[2]), 1e-5);
        assert!(matches!(r, Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn running_stats_update() {
        let mut s = BatchNormState::new(1, 0.1, 1e-5);
        s.update(&BatchStats {
            mean: vec![2.0],
            var: vec![1.0],
            count: 2,
        });
        assert!((s.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((s.running_var[0] - (0.9 + 0.2)).abs() < 1e-15);
        let x = Tensor::matrix(1, 1, vec![0.2]).unwrap();
        let y = batchnorm_eval(&x, &Tensor::vector(vec![1.0]), &Tensor::vector(vec![0.5]), &s).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = crate::seeding::Rng::seed_from_u64(8);
        let x = normal_tensor(&[6, 3], 1.0, &mut rng);
        let gamma = normal_tensor(&[3], 1.0, &mut rng);
        let beta = normal_tensor(&[3], 1.0, &mut rng);
        let r = normal_tensor(&[6, 3], 1.0, &mut rng);
        let f = |x: &Tensor, g: &Tensor, b: &Tensor| -> f64 {
            let (y, _, _) = batchnorm_train(x, g, b, 1e-5).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache, _) = batchnorm_train(&x, &gamma, &beta, 1e-5).unwrap();
        let (gx, gg, gb) = batchnorm_backward(&cache, &gamma, &r);
        assert!(max_relative_error(gx.data(), finite_diff_grad(|t| f(t, &gamma, &beta), &x, 1e-5).data()) < 1e-4);
        assert!(max_relative_error(gg.data(), finite_diff_grad(|t| f(&x, t, &beta), &gamma, 1e-5).data()) < 1e-4);
        assert!(max_relative_error(gb.data(), finite_diff_grad(|t| f(&x, &gamma, t), &beta, 1e-5).data()) < 1e-4);
    }
}
