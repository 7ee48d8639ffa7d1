//! Dense affine layers and the two-layer projector head.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_PROJ_DIM: usize = 128;

/// `y = x·W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d_in) = (x.rows(), x.cols());
    let d_out = b.len();
    if w.len() != d_in * d_out {
        return Err(Error::DimensionMismatch {
            expected: d_in * d_out,
            found: w.len(),
        });
    }
    let wd = w.data();
    let mut y = Vec::with_capacity(n * d_out);
    for r in 0..n {
        let mut acc = b.data().to_vec();
        for (i, &xi) in x.row(r).iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wr = &wd[i * d_out..(i + 1) * d_out];
            for (a, &wv) in acc.iter_mut().zip(wr) {
                *a += xi * wv;
            }
        }
        y.extend(acc);
    }
    Tensor::matrix(n, d_out, y)
}

/// Gradients of `linear_forward` w.r.t. input, weight and bias.
pub fn linear_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, d_in, d_out) = (x.rows(), x.cols(), gy.cols());
    let wd = w.data();
    let mut gx = Tensor::zeros(&[n, d_in]);
    let mut gw = Tensor::zeros(&[d_in, d_out]);
    let mut gb = Tensor::zeros(&[d_out]);
    for r in 0..n {
        let g = gy.row(r);
        for (a, &gv) in gb.data_mut().iter_mut().zip(g) {
            *a += gv;
        }
        let xr = x.row(r);
        let gxr = gx.row_mut(r);
        for i in 0..d_in {
            let wr = &wd[i * d_out..(i + 1) * d_out];
            gxr[i] = wr.iter().zip(g).map(|(a, b)| a * b).sum();
        }
        let gwd = gw.data_mut();
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (a, &gv) in gwd[i * d_out..(i + 1) * d_out].iter_mut().zip(g) {
                *a += xi * gv;
            }
        }
    }
    (gx, gw, gb)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Masks `grad` by `pre > 0`.
pub fn relu_backward(pre: &Tensor, grad: &Tensor) -> Tensor {
    let data = pre
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(pre.shape(), data).expect("shapes agree")
}

pub fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(shape, data).expect("positive shape")
}

/// `Linear(in → hidden) → ReLU → Linear(hidden → out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpProjector {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    w1: String,
    b1: String,
    w2: String,
    b2: String,
}

#[derive(Debug, Clone)]
pub struct ProjectorCache {
    x: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
}

#[derive(Debug, Clone)]
pub struct ProjectorGrads {
    pub input: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpProjector {
    /// A projector whose hidden width equals its input width.
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        MlpProjector {
            in_dim,
            hidden_dim: in_dim,
            out_dim,
            w1: format!("{prefix}.w1"),
            b1: format!("{prefix}.b1"),
            w2: format!("{prefix}.w2"),
            b2: format!("{prefix}.b2"),
        }
    }

    pub fn param_names(&self) -> [&str; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let std1 = (2.0 / self.in_dim as f64).sqrt();
        let std2 = (1.0 / self.hidden_dim as f64).sqrt();
        store.insert(&self.w1, normal_tensor(&[self.in_dim, self.hidden_dim], std1, rng));
        store.insert(&self.b1, Tensor::zeros(&[self.hidden_dim]));
        store.insert(&self.w2, normal_tensor(&[self.hidden_dim, self.out_dim], std2, rng));
        store.insert(&self.b2, Tensor::zeros(&[self.out_dim]));
    }

    /// Projects each row of `x: [n, in_dim]`.
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, ProjectorCache)> {
        if x.cols() != self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                found: x.cols(),
            });
        }
        let hidden_pre = linear_forward(x, store.value(&self.w1), store.value(&self.b1))?;
        let hidden = relu(&hidden_pre);
        let y = linear_forward(&hidden, store.value(&self.w2), store.value(&self.b2))?;
        Ok((
            y,
            ProjectorCache {
                x: x.clone(),
                hidden_pre,
                hidden,
            },
        ))
    }

    pub fn backward(&self, store: &ParamStore, cache: &ProjectorCache, grad_out: &Tensor) -> Result<ProjectorGrads> {
        if grad_out.rows() != cache.x.rows() || grad_out.cols() != self.out_dim {
            return Err(Error::DimensionMismatch {
                expected: cache.x.rows() * self.out_dim,
                found: grad_out.len(),
            });
        }
        let (g_hidden, w2, b2) = linear_backward(&cache.hidden, store.value(&self.w2), grad_out);
        let g_pre = relu_backward(&cache.hidden_pre, &g_hidden);
        let (input, w1, b1) = linear_backward(&cache.x, store.value(&self.w1), &g_pre);
        Ok(ProjectorGrads { input, w1, b1, w2, b2 })
    }

    pub fn accumulate(&self, store: &mut ParamStore, g: &ProjectorGrads) -> Result<()> {
        store.accumulate_grad(&self.w1, &g.w1)?;
        store.accumulate_grad(&self.b1, &g.b1)?;
        store.accumulate_grad(&self.w2, &g.w2)?;
        store.accumulate_grad(&self.b2, &g.b2)
    }
}
