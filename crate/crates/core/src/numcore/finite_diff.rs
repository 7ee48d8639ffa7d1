use super::Tensor;

/// Central-difference gradient estimate of `f` at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for k in 0..x.len() {
        let orig = x.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[k] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[k] = orig;
        grad.data_mut()[k] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
