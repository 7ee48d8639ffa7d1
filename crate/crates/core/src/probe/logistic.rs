use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    /// Each row scaled to unit Euclidean norm.
    L2Unit,
    /// Per-feature standardization with statistics of the training rows.
    StandardScale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    kind: Normalization,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Normalizer {
    pub fn fit(kind: Normalization, x: &[f64], dim: usize) -> Self {
        let n = (x.len() / dim.max(1)).max(1) as f64;
        let (mut mean, mut scale) = (vec![0.0; dim], vec![1.0; dim]);
        if kind == Normalization::StandardScale {
            for row in x.chunks(dim) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v / n;
                }
            }
            let mut var = vec![0.0; dim];
            for row in x.chunks(dim) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m) / n;
                }
            }
            scale = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        }
        Normalizer { kind, mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let dim = self.mean.len();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(dim) {
            match self.kind {
                Normalization::L2Unit => {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
                    out.extend(row.iter().map(|v| v * inv));
                }
                Normalization::StandardScale => {
                    out.extend(row.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s))
                }
            }
        }
        out
    }
}

/// Multinomial logistic regression. The last class is the reference and has
/// fixed zero weights, which keeps the objective strictly convex when
/// `l2 > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub classes: usize,
    pub dim: usize,
    /// `[(classes - 1), dim + 1]`, bias last in each row.
    pub weights: Vec<f64>,
    pub normalizer: Normalizer,
    pub iterations: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub l2: f64,
    pub normalization: Normalization,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            l2: 1e-3,
            normalization: Normalization::L2Unit,
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

/// Row-wise class probabilities for already normalized rows.
fn probabilities(w: &[f64], x: &[f64], dim: usize, classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() / dim * classes);
    let mut logits = vec![0.0; classes];
    for row in x.chunks(dim) {
        for (c, l) in logits.iter_mut().enumerate().take(classes - 1) {
            let wc = &w[c * (dim + 1)..(c + 1) * (dim + 1)];
            *l = wc[dim] + wc[..dim].iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
        }
        logits[classes - 1] = 0.0;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        out.extend(logits.iter().map(|l| (l - max).exp() / total));
    }
    out
}

/// Mean negative log-likelihood plus `l2 / 2 · ‖W‖²` (biases excluded).
pub fn objective(w: &[f64], x: &[f64], labels: &[usize], dim: usize, classes: usize, l2: f64) -> f64 {
    let mut nll = 0.0;
    for (row, &y) in x.chunks(dim).zip(labels) {
        let mut logits = vec![0.0; classes];
        for (c, l) in logits.iter_mut().enumerate().take(classes - 1) {
            let wc = &w[c * (dim + 1)..(c + 1) * (dim + 1)];
            *l = wc[dim] + wc[..dim].iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        nll += lse - logits[y];
    }
    let reg: f64 = w
        .chunks(dim + 1)
        .flat_map(|wc| wc[..dim].iter())
        .map(|v| v * v)
        .sum();
    nll / labels.len() as f64 + 0.5 * l2 * reg
}

fn gradient_and_hessian(w: &[f64], x: &[f64], labels: &[usize], dim: usize, classes: usize, l2: f64) -> (DVector<f64>, DMatrix<f64>) {
    let k = classes - 1;
    let d1 = dim + 1;
    let p = k * d1;
    let n = labels.len() as f64;
    let probs = probabilities(w, x, dim, classes);
    let mut g = DVector::zeros(p);
    let mut h = DMatrix::zeros(p, p);
    let mut xt = vec![1.0; d1];
    for (r, (row, &y)) in x.chunks(dim).zip(labels).enumerate() {
        xt[..dim].copy_from_slice(row);
        let pr = &probs[r * classes..r * classes + k];
        for a in 0..k {
            let resid = pr[a] - if y == a { 1.0 } else { 0.0 };
            for i in 0..d1 {
                g[a * d1 + i] += resid * xt[i] / n;
            }
            for b in 0..k {
                let coef = (if a == b { pr[a] } else { 0.0 } - pr[a] * pr[b]) / n;
                if coef == 0.0 {
                    continue;
                }
                for i in 0..d1 {
                    let ci = coef * xt[i];
                    let hrow = a * d1 + i;
                    for j in 0..d1 {
                        h[(hrow, b * d1 + j)] += ci * xt[j];
                    }
                }
            }
        }
    }
    for a in 0..k {
        for i in 0..dim {
            let idx = a * d1 + i;
            g[idx] += l2 * w[idx];
            h[(idx, idx)] += l2;
        }
    }
    (g, h)
}

pub(crate) fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::DegenerateLabels(format!("need >= 2 classes, got {classes}")));
    }
    let mut seen = vec![false; classes];
    for &y in labels {
        if y >= classes {
            return Err(Error::DegenerateLabels(format!("label {y} out of range for {classes} classes")));
        }
        seen[y] = true;
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::DegenerateLabels(format!("class {c} has no training rows")));
    }
    Ok(())
}

/// Fits from zero weights. See [`fit_logistic_from`].
pub fn fit_logistic(x: &[f64], labels: &[usize], dim: usize, classes: usize, opts: &FitOptions) -> Result<LogisticModel> {
    fit_logistic_from(x, labels, dim, classes, opts, None)
}

/// Damped Newton iterations with backtracking line search until the
/// gradient norm drops below `opts.tol`. Every class must be present.
pub fn fit_logistic_from(
    x: &[f64],
    labels: &[usize],
    dim: usize,
    classes: usize,
    opts: &FitOptions,
    init: Option<&[f64]>,
) -> Result<LogisticModel> {
    if dim == 0 || x.len() != labels.len() * dim {
        return Err(Error::DimensionMismatch {
            expected: labels.len() * dim,
            found: x.len(),
        });
    }
    if !(opts.l2 >= 0.0) {
        return Err(Error::config(format!("l2 must be >= 0, got {}", opts.l2)));
    }
    check_labels(labels, classes)?;
    let normalizer = Normalizer::fit(opts.normalization, x, dim);
    let xn = normalizer.apply(x);
    let p = (classes - 1) * (dim + 1);
    let mut w = match init {
        Some(w0) if w0.len() == p => w0.to_vec(),
        Some(w0) => {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: w0.len(),
            })
        }
        None => vec![0.0; p],
    };
    let f = |w: &[f64]| objective(w, &xn, labels, dim, classes, opts.l2);
    let mut current = f(&w);
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    while iterations < opts.max_iter {
        let (g, mut h) = gradient_and_hessian(&w, &xn, labels, dim, classes, opts.l2);
        grad_norm = g.norm();
        if grad_norm < opts.tol {
            break;
        }
        iterations += 1;
        let mut damping = 1e-10;
        let step = loop {
            if let Some(chol) = h.clone().cholesky() {
                break chol.solve(&g);
            }
            for i in 0..p {
                h[(i, i)] += damping;
            }
            damping *= 10.0;
            if damping > 1e6 {
                break g.clone();
            }
        };
        let slope = -g.dot(&step);
        let mut t = 1.0;
        let mut improved = false;
        while t > 1e-12 {
            let cand: Vec<f64> = w.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
            let value = f(&cand);
            if value <= current + 1e-4 * t * slope {
                w = cand;
                current = value;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(LogisticModel {
        classes,
        dim,
        weights: w,
        normalizer,
        iterations,
        grad_norm,
    })
}

impl LogisticModel {
    /// Row-major `[n, classes]` probabilities for raw (unnormalized) rows.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        probabilities(&self.weights, &self.normalizer.apply(x), self.dim, self.classes)
    }

    /// Objective value on raw rows.
    pub fn loss(&self, x: &[f64], labels: &[usize], l2: f64) -> f64 {
        objective(&self.weights, &self.normalizer.apply(x), labels, self.dim, self.classes, l2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::macro_auc;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn gauss(rng: &mut crate::seeding::Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn separable_toy_reaches_perfect_auc() {
        let x = vec![1.0, 2.0, 2.0, 1.5, 1.5, 3.0, -1.0, -2.0, -2.0, -0.5, -1.0, -3.0];
        let y = vec![1, 1, 1, 0, 0, 0];
        let opts = FitOptions {
            l2: 1e-3,
            normalization: Normalization::StandardScale,
            ..FitOptions::default()
        };
        let m = fit_logistic(&x, &y, 2, 2, &opts).unwrap();
        assert!(m.grad_norm < 1e-6);
        assert_eq!(macro_auc(&m.predict_proba(&x), &y, 2).unwrap(), 1.0);
    }

    #[test]
    fn single_class_rejected() {
        let r = fit_logistic(&[1.0, 2.0], &[0, 0], 1, 2, &FitOptions::default());
        assert!(matches!(r, Err(Error::DegenerateLabels(_))));
    }

    #[test]
    fn convex_objective_reaches_same_minimum() {
        let mut rng = crate::seeding::Rng::seed_from_u64(3);
        let (n, d) = (120, 5);
        let x = gauss(&mut rng, n * d);
        let y: Vec<usize> = (0..n).map(|i| (x[i * d] + 0.5 * x[i * d + 1] > 0.3) as usize + (i % 3 == 0) as usize).collect();
        for norm in [Normalization::L2Unit, Normalization::StandardScale] {
            let opts = FitOptions {
                normalization: norm,
                ..FitOptions::default()
            };
            let base = fit_logistic(&x, &y, d, 3, &opts).unwrap();
            for _ in 0..5 {
                let init = gauss(&mut rng, 2 * (d + 1)).iter().map(|v| v * 3.0).collect::<Vec<_>>();
                let m = fit_logistic_from(&x, &y, d, 3, &opts, Some(&init)).unwrap();
                assert!((m.loss(&x, &y, opts.l2) - base.loss(&x, &y, opts.l2)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = crate::seeding::Rng::seed_from_u64(4);
        let (n, d, c) = (30, 3, 3);
        let x = gauss(&mut rng, n * d);
        let y: Vec<usize> = (0..n).map(|i| i % c).collect();
        let w = gauss(&mut rng, (c - 1) * (d + 1));
        let (g, _) = gradient_and_hessian(&w, &x, &y, d, c, 0.1);
        for k in 0..w.len() {
            let h = 1e-6;
            let (mut a, mut b) = (w.clone(), w.clone());
            a[k] += h;
            b[k] -= h;
            let num = (objective(&a, &x, &y, d, c, 0.1) - objective(&b, &x, &y, d, c, 0.1)) / (2.0 * h);
            assert!((num - g[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn standard_scale_uses_training_statistics() {
        let n = Normalizer::fit(Normalization::StandardScale, &[1.0, 10.0, 3.0, 10.0], 2);
        assert_eq!(n.apply(&[2.0, 10.0, 4.0, 11.0]), vec![0.0, 0.0, 2.0, 1.0]);
    }
}
