//! Finite-difference verification of every hand-written backward pass.

use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::numcore::linear::normal_tensor;
use crate::numcore::{finite_diff_grad, max_relative_error, MlpProjector, ParamStore, Tensor};
use crate::seeding;
use crate::selftest::oracle::random_map;
use crate::sparseconv::{
    batchnorm_backward, batchnorm_train, segment_mean, segment_mean_backward, stack_maps, submconv_backward,
    submconv_forward, BnBuffers, Mode, PoolingNetwork, PoolingNetworkConfig, ResidualBlock, Rulebook,
};
use crate::ssl::nt_xent;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Instances with a ReLU input closer than this to zero are redrawn: a step of
/// `STEP` could cross the kink, where the function has no derivative to check.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub instances: usize,
    /// Largest element-wise relative error over all instances and tensors.
    pub max_rel_error: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks `analytic` against central differences of `f` around `x`.
fn compare(analytic: &Tensor, x: &Tensor, f: impl FnMut(&Tensor) -> f64) -> f64 {
    let numeric = finite_diff_grad(f, x, STEP);
    max_relative_error(analytic.data(), numeric.data())
}

/// Checks every named gradient of `grads` by perturbing the parameter in a
/// copy of `store`.
fn compare_params(store: &ParamStore, grads: &[(String, Tensor)], loss: impl Fn(&ParamStore) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, g) in grads {
        let err = compare(g, store.value(name), |t| {
            let mut s = store.clone();
            *s.value_mut(name) = t.clone();
            loss(&s)
        });
        worst = worst.max(err);
    }
    worst
}

fn check_conv(rng: &mut seeding::Rng) -> Result<f64> {
    let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
    let n = rng.random_range(2..10);
    let map = random_map(rng, 4, n, ci);
    let rb = Rulebook::build(&map, 3)?;
    let x = Tensor::matrix(map.len(), ci, map.features().to_vec())?;
    let w = normal_tensor(&[3, 3, ci, co], 1.0, rng);
    let b = normal_tensor(&[co], 1.0, rng);
    let r = normal_tensor(&[map.len(), co], 1.0, rng);
    let f = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&submconv_forward(x, w, b, &rb).expect("shapes checked"), &r);
    let g = submconv_backward(&x, &w, &r, &rb)?;
    Ok(compare(&g.input, &x, |t| f(t, &w, &b))
        .max(compare(&g.weights, &w, |t| f(&x, t, &b)))
        .max(compare(&g.bias, &b, |t| f(&x, &w, t))))
}

fn check_batchnorm(rng: &mut seeding::Rng) -> Result<f64> {
    // Two sites normalize to ±1 whatever their values, which leaves an input
    // gradient of order eps: pure finite-difference noise. Use at least 3.
    let (n, c) = (rng.random_range(3..12), rng.random_range(1..5));
    let x = normal_tensor(&[n, c], 2.0, rng);
    let gamma = normal_tensor(&[c], 1.0, rng);
    let beta = normal_tensor(&[c], 1.0, rng);
    let r = normal_tensor(&[n, c], 1.0, rng);
    let f = |x: &Tensor, g: &Tensor, b: &Tensor| dot(&batchnorm_train(x, g, b, 1e-5).expect("n >= 2").0, &r);
    let (_, cache, _) = batchnorm_train(&x, &gamma, &beta, 1e-5)?;
    let (gx, gg, gb) = batchnorm_backward(&cache, &gamma, &r);
    Ok(compare(&gx, &x, |t| f(t, &gamma, &beta))
        .max(compare(&gg, &gamma, |t| f(&x, t, &beta)))
        .max(compare(&gb, &beta, |t| f(&x, &gamma, t))))
}

fn check_block(rng: &mut seeding::Rng, instance: usize) -> Result<f64> {
    let ci = rng.random_range(1..4);
    let co = if instance.is_multiple_of(2) { ci } else { rng.random_range(1..4) };
    let block = ResidualBlock::new("b", ci, co, 3);
    let mut store = ParamStore::new();
    let mut buffers = BnBuffers::new();
    block.init(&mut store, &mut buffers, 0.1, 1e-5, rng);
    for name in block.param_names() {
        if name.ends_with("beta") || name.ends_with(".b") {
            let shape = store.value(&name).shape().to_vec();
            *store.value_mut(&name) = normal_tensor(&shape, 0.5, rng);
        }
    }
    let (map, rb, cache) = loop {
        let n = rng.random_range(3..10);
        let map = random_map(rng, 4, n, ci);
        let rb = Rulebook::build(&map, 3)?;
        let x = Tensor::matrix(map.len(), ci, map.features().to_vec())?;
        let cache = block.forward(&store, &buffers, &x, &rb, Mode::Train)?.cache.expect("train mode keeps caches");
        if cache.kink_margin() > KINK_MARGIN {
            break (map, rb, cache);
        }
    };
    let x = Tensor::matrix(map.len(), ci, map.features().to_vec())?;
    let r = normal_tensor(&[map.len(), co], 1.0, rng);
    let loss = |s: &ParamStore, x: &Tensor| dot(&block.forward(s, &buffers, x, &rb, Mode::Train).expect("valid").y, &r);
    let (gx, grads) = block.backward(&store, &cache, &r, &rb)?;
    Ok(compare(&gx, &x, |t| loss(&store, t)).max(compare_params(&store, &grads, |s| loss(s, &x))))
}

fn check_pool(rng: &mut seeding::Rng) -> Result<f64> {
    let c = rng.random_range(1..5);
    let maps: Vec<_> = (0..rng.random_range(1..4))
        .map(|_| {
            let n = rng.random_range(1..6);
            random_map(rng, 4, n, c)
        })
        .collect();
    let (x, segs) = stack_maps(&maps)?;
    let r = normal_tensor(&[maps.len(), c], 1.0, rng);
    let g = segment_mean_backward(&r, &segs, x.rows());
    Ok(compare(&g, &x, |t| dot(&segment_mean(t, &segs).expect("segments valid"), &r)))
}

fn check_network(rng: &mut seeding::Rng) -> Result<f64> {
    let cfg = PoolingNetworkConfig {
        in_channels: 3,
        block_channels: vec![4, 4],
        kernel_size: 3,
        out_dim: 5,
        bn_momentum: 0.1,
        bn_eps: 1e-5,
    };
    let net = PoolingNetwork::new(cfg)?;
    let mut store = ParamStore::new();
    let mut buffers = BnBuffers::new();
    net.init(&mut store, &mut buffers, rng);
    let (maps, trace) = loop {
        let maps: Vec<_> = (0..rng.random_range(2..4))
            .map(|_| {
                let n = rng.random_range(2..6);
                random_map(rng, 4, n, 3)
            })
            .collect();
        let (_, trace) = net.forward(&store, &buffers, &maps, Mode::Train)?;
        if trace.kink_margin() > KINK_MARGIN {
            break (maps, trace);
        }
    };
    let r = normal_tensor(&[maps.len(), 5], 1.0, rng);
    let loss = |s: &ParamStore| dot(&net.forward(s, &buffers, &maps, Mode::Train).expect("valid").0, &r);
    let (_, grads) = net.backward(&store, &trace, &r)?;
    Ok(compare_params(&store, &grads, loss))
}

fn check_projector(rng: &mut seeding::Rng) -> Result<f64> {
    let (d, p, n) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..5));
    let proj = MlpProjector::new("p", d, p);
    let mut store = ParamStore::new();
    proj.init(&mut store, rng);
    for name in proj.param_names() {
        let shape = store.value(name).shape().to_vec();
        *store.value_mut(name) = normal_tensor(&shape, 1.0, rng);
    }
    let x = normal_tensor(&[n, d], 1.0, rng);
    let r = normal_tensor(&[n, p], 1.0, rng);
    let loss = |s: &ParamStore, x: &Tensor| dot(&proj.forward(s, x).expect("valid").0, &r);
    let (_, cache) = proj.forward(&store, &x)?;
    let g = proj.backward(&store, &cache, &r)?;
    let [w1, b1, w2, b2] = proj.param_names();
    let grads = vec![
        (w1.to_string(), g.w1),
        (b1.to_string(), g.b1),
        (w2.to_string(), g.w2),
        (b2.to_string(), g.b2),
    ];
    Ok(compare(&g.input, &x, |t| loss(&store, t)).max(compare_params(&store, &grads, |s| loss(s, &x))))
}

fn check_nt_xent(rng: &mut seeding::Rng) -> Result<f64> {
    let b = rng.random_range(2..5);
    let d = rng.random_range(2..8);
    let tau = rng.random_range(0.2..1.0);
    let z = normal_tensor(&[2 * b, d], 1.0, rng);
    let (_, g) = nt_xent(&z, tau)?;
    Ok(compare(&g, &z, |t| nt_xent(t, tau).expect("nonzero rows").0))
}

pub const LAYERS: [&str; 7] = [
    "submconv",
    "batchnorm",
    "residual_block",
    "global_pool",
    "pooling_network",
    "projector",
    "nt_xent",
];

/// Runs `instances` random instances of every layer check.
pub fn run(instances: usize, seed: u64) -> Result<Vec<LayerCheck>> {
    let mut out = Vec::with_capacity(LAYERS.len());
    for (k, &layer) in LAYERS.iter().enumerate() {
        let mut rng = seeding::Rng::seed_from_u64(seeding::derive(seed, k as u64));
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let err = match k {
                0 => check_conv(&mut rng)?,
                1 => check_batchnorm(&mut rng)?,
                2 => check_block(&mut rng, i)?,
                3 => check_pool(&mut rng)?,
                4 => check_network(&mut rng)?,
                5 => check_projector(&mut rng)?,
                _ => check_nt_xent(&mut rng)?,
            };
            worst = worst.max(err);
        }
        out.push(LayerCheck {
            layer,
            instances,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
