use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Index of the positive partner of view `i` among `2b` views laid out as
/// `[first views of all slides, second views of all slides]`.
pub fn partner(i: usize, b: usize) -> usize {
    (i + b) % (2 * b)
}

/// Normalized-temperature cross-entropy over `z: [2B, D]` with cosine
/// similarity. Each view's denominator runs over the other `2B - 1` views;
/// the loss is the mean over all `2B` views. Returns the loss and its
/// gradient w.r.t. `z`.
pub fn nt_xent(z: &Tensor, tau: f64) -> Result<(f64, Tensor)> {
    let (n, d) = (z.rows(), z.cols());
    if n < 2 || n % 2 != 0 {
        return Err(Error::config(format!("nt_xent needs an even number of views >= 2, got {n}")));
    }
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature must be > 0, got {tau}")));
    }
    let b = n / 2;
    let mut norms = Vec::with_capacity(n);
    let mut u = vec![0.0; n * d];
    for i in 0..n {
        let row = z.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateProjection(i));
        }
        for (o, v) in u[i * d..(i + 1) * d].iter_mut().zip(row) {
            *o = v / norm;
        }
        norms.push(norm);
    }
    let ui = |i: usize| &u[i * d..(i + 1) * d];
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = ui(i).iter().zip(ui(j)).map(|(a, c)| a * c).sum::<f64>() / tau;
        }
    }
    // a[i][j] = dL/ds_ij for the occurrence of s_ij inside ℓ_i.
    let scale = 1.0 / n as f64;
    let mut a = vec![0.0; n * n];
    let mut loss = 0.0;
    for i in 0..n {
        let p = partner(i, b);
        let max = (0..n).filter(|&j| j != i).map(|j| s[i * n + j]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&j| j != i).map(|j| (s[i * n + j] - max).exp()).sum();
        loss += max + denom.ln() - s[i * n + p];
        for j in (0..n).filter(|&j| j != i) {
            let prob = (s[i * n + j] - max).exp() / denom;
            a[i * n + j] = scale * (prob - if j == p { 1.0 } else { 0.0 });
        }
    }
    loss *= scale;

    let mut grad = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let mut gu = vec![0.0; d];
        for j in (0..n).filter(|&j| j != i) {
            let g = (a[i * n + j] + a[j * n + i]) / tau;
            for (o, v) in gu.iter_mut().zip(ui(j)) {
                *o += g * v;
            }
        }
        let dot: f64 = gu.iter().zip(ui(i)).map(|(a, c)| a * c).sum();
        for ((o, g), v) in grad.row_mut(i).iter_mut().zip(&gu).zip(ui(i)) {
            *o = (g - dot * v) / norms[i];
        }
    }
    Ok((loss, grad))
}
