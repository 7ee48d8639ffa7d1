use rand::Rng;

use super::{
    batchnorm_backward, batchnorm_eval, batchnorm_train, submconv_backward, submconv_forward, BatchStats, BnBuffers,
    BnCache, Grads, Mode, Rulebook,
};
use crate::error::{Error, Result};
use crate::numcore::linear::{linear_backward, linear_forward, normal_tensor, relu, relu_backward};
use crate::numcore::{ParamStore, Tensor};

/// Basic residual block: `conv → BN → ReLU → conv → BN`, added to the skip
/// path (identity, or a 1×1 projection when widths differ), then ReLU. The
/// convolutions carry no bias since batch norm removes any per-channel shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    prefix: String,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    x: Tensor,
    pre1: Tensor,
    bn1: BnCache,
    act1: Tensor,
    bn2: BnCache,
    sum: Tensor,
}

impl BlockCache {
    /// Smallest distance of any ReLU input to the kink at zero.
    pub fn kink_margin(&self) -> f64 {
        self.pre1.data().iter().chain(self.sum.data()).fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

pub struct BlockOutput {
    pub y: Tensor,
    pub cache: Option<BlockCache>,
    pub stats: Vec<(String, BatchStats)>,
}

impl ResidualBlock {
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        ResidualBlock {
            in_channels,
            out_channels,
            kernel_size,
            prefix: prefix.to_string(),
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn has_projection(&self) -> bool {
        self.in_channels != self.out_channels
    }

    pub fn bn_names(&self) -> [String; 2] {
        [self.name("bn1"), self.name("bn2")]
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, buffers: &mut BnBuffers, momentum: f64, eps: f64, rng: &mut R) {
        let k = self.kernel_size;
        let (ci, co) = (self.in_channels, self.out_channels);
        let std1 = (2.0 / (k * k * ci) as f64).sqrt();
        let std2 = (2.0 / (k * k * co) as f64).sqrt();
        store.insert(self.name("conv1.w"), normal_tensor(&[k, k, ci, co], std1, rng));
        store.insert(self.name("conv2.w"), normal_tensor(&[k, k, co, co], std2, rng));
        for bn in ["bn1", "bn2"] {
            store.insert(self.name(&format!("{bn}.gamma")), Tensor::vector(vec![1.0; co]));
            store.insert(self.name(&format!("{bn}.beta")), Tensor::zeros(&[co]));
            buffers.insert(self.name(bn), super::BatchNormState::new(co, momentum, eps));
        }
        if self.has_projection() {
            store.insert(self.name("skip.w"), normal_tensor(&[ci, co], (1.0 / ci as f64).sqrt(), rng));
            store.insert(self.name("skip.b"), Tensor::zeros(&[co]));
        }
    }

    fn bn_forward(
        &self,
        bn: &str,
        store: &ParamStore,
        buffers: &BnBuffers,
        x: &Tensor,
        mode: Mode,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<(Tensor, Option<BnCache>)> {
        let gamma = store.value(&self.name(&format!("{bn}.gamma")));
        let beta = store.value(&self.name(&format!("{bn}.beta")));
        let key = self.name(bn);
        let state = buffers
            .get(&key)
            .ok_or_else(|| Error::config(format!("missing batch-norm state `{key}`")))?;
        match mode {
            Mode::Train => {
                let (y, cache, s) = batchnorm_train(x, gamma, beta, state.eps)?;
                stats.push((key, s));
                Ok((y, Some(cache)))
            }
            Mode::Eval => Ok((batchnorm_eval(x, gamma, beta, state)?, None)),
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        buffers: &BnBuffers,
        x: &Tensor,
        rb: &Rulebook,
        mode: Mode,
    ) -> Result<BlockOutput> {
        if x.cols() != self.in_channels {
            return Err(Error::DimensionMismatch {
                expected: self.in_channels,
                found: x.cols(),
            });
        }
        let mut stats = Vec::new();
        let no_bias = Tensor::zeros(&[self.out_channels]);
        let h1 = submconv_forward(x, store.value(&self.name("conv1.w")), &no_bias, rb)?;
        let (pre1, bn1) = self.bn_forward("bn1", store, buffers, &h1, mode, &mut stats)?;
        let act1 = relu(&pre1);
        let h2 = submconv_forward(&act1, store.value(&self.name("conv2.w")), &no_bias, rb)?;
        let (mut sum, bn2) = self.bn_forward("bn2", store, buffers, &h2, mode, &mut stats)?;
        if self.has_projection() {
            sum.add_assign(&linear_forward(x, store.value(&self.name("skip.w")), store.value(&self.name("skip.b")))?);
        } else {
            sum.add_assign(x);
        }
        let y = relu(&sum);
        let cache = match (bn1, bn2) {
            (Some(bn1), Some(bn2)) => Some(BlockCache {
                x: x.clone(),
                pre1,
                bn1,
                act1,
                bn2,
                sum,
            }),
            _ => None,
        };
        Ok(BlockOutput { y, cache, stats })
    }

    /// Returns the input gradient and named parameter gradients.
    pub fn backward(&self, store: &ParamStore, cache: &BlockCache, grad_out: &Tensor, rb: &Rulebook) -> Result<(Tensor, Grads)> {
        let mut grads = Grads::new();
        let g_sum = relu_backward(&cache.sum, grad_out);

        let (g_h2, g_gamma2, g_beta2) = batchnorm_backward(&cache.bn2, store.value(&self.name("bn2.gamma")), &g_sum);
        grads.push((self.name("bn2.gamma"), g_gamma2));
        grads.push((self.name("bn2.beta"), g_beta2));
        let c2 = submconv_backward(&cache.act1, store.value(&self.name("conv2.w")), &g_h2, rb)?;
        grads.push((self.name("conv2.w"), c2.weights));

        let g_pre1 = relu_backward(&cache.pre1, &c2.input);
        let (g_h1, g_gamma1, g_beta1) = batchnorm_backward(&cache.bn1, store.value(&self.name("bn1.gamma")), &g_pre1);
        grads.push((self.name("bn1.gamma"), g_gamma1));
        grads.push((self.name("bn1.beta"), g_beta1));
        let c1 = submconv_backward(&cache.x, store.value(&self.name("conv1.w")), &g_h1, rb)?;
        grads.push((self.name("conv1.w"), c1.weights));

        let mut g_x = c1.input;
        if self.has_projection() {
            let (g_skip, g_w, g_b) = linear_backward(&cache.x, store.value(&self.name("skip.w")), &g_sum);
            g_x.add_assign(&g_skip);
            grads.push((self.name("skip.w"), g_w));
            grads.push((self.name("skip.b"), g_b));
        } else {
            g_x.add_assign(&g_sum);
        }
        Ok((g_x, grads))
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = [
            "conv1.w", "bn1.gamma", "bn1.beta", "conv2.w", "bn2.gamma", "bn2.beta",
        ]
        .iter()
        .map(|p| self.name(p))
        .collect();
        if self.has_projection() {
            names.push(self.name("skip.w"));
            names.push(self.name("skip.b"));
        }
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff_grad, max_relative_error};
    use crate::selftest::oracle;
    use crate::sparsemap::SparseMap;
    use rand::SeedableRng;

    fn setup(ci: usize, co: usize, seed: u64) -> (ResidualBlock, ParamStore, BnBuffers) {
        let block = ResidualBlock::new("b0", ci, co, 3);
        let mut store = ParamStore::new();
        let mut buffers = BnBuffers::new();
        block.init(&mut store, &mut buffers, 0.1, 1e-5, &mut crate::seeding::Rng::seed_from_u64(seed));
        (block, store, buffers)
    }

    #[test]
    fn zero_weights_reduce_to_relu_skip() {
        let (block, mut store, buffers) = setup(3, 3, 0);
        for name in block.param_names() {
            store.value_mut(&name).fill(0.0);
        }
        let m = SparseMap::new(vec![(0, 0), (1, 0), (3, 2)], vec![1.0, -2.0, 0.5, -0.1, 3.0, 0.0, 2.0, -1.0, 4.0], 3).unwrap();
        let rb = Rulebook::build(&m, 3).unwrap();
        let x = Tensor::matrix(3, 3, m.features().to_vec()).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let out = block.forward(&store, &buffers, &x, &rb, mode).unwrap();
            assert_eq!(out.y, relu(&x));
        }
    }

    #[test]
    fn single_site_equals_vector_math() {
        let (block, mut store, mut buffers) = setup(2, 3, 1);
        let mut rng = crate::seeding::Rng::seed_from_u64(9);
        for bn in block.bn_names() {
            let s = buffers.get_mut(&bn).unwrap();
            s.running_mean = normal_tensor(&[3], 0.5, &mut rng).into_data();
            s.running_var = normal_tensor(&[3], 0.5, &mut rng).into_data().iter().map(|v| v * v + 0.5).collect();
        }
        for name in block.param_names() {
            if name.ends_with(".b") || name.ends_with("beta") {
                let shape = store.value(&name).shape().to_vec();
                *store.value_mut(&name) = normal_tensor(&shape, 0.3, &mut rng);
            }
        }
        let f = vec![0.7, -1.3];
        let m = SparseMap::new(vec![(5, 5)], f.clone(), 2).unwrap();
        let rb = Rulebook::build(&m, 3).unwrap();
        let x = Tensor::matrix(1, 2, f.clone()).unwrap();
        let y = block.forward(&store, &buffers, &x, &rb, Mode::Eval).unwrap().y;
        let expected = oracle::residual_block_single_site(&store, &buffers, "b0", &f, 3, true);
        for (a, b) in y.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn eval_mode_has_no_cache() {
        let (block, store, buffers) = setup(2, 2, 2);
        let m = SparseMap::new(vec![(0, 0), (0, 1)], vec![1.0, 2.0, 3.0, 4.0], 2).unwrap();
        let rb = Rulebook::build(&m, 3).unwrap();
        let x = Tensor::matrix(2, 2, m.features().to_vec()).unwrap();
        assert!(block.forward(&store, &buffers, &x, &rb, Mode::Eval).unwrap().cache.is_none());
        assert!(block.forward(&store, &buffers, &x, &rb, Mode::Train).unwrap().cache.is_some());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (ci, co) in [(3, 3), (2, 4)] {
            let (block, store, buffers) = setup(ci, co, 4);
            let mut rng = crate::seeding::Rng::seed_from_u64(12);
            let m = oracle::random_map(&mut rng, 4, 8, ci);
            let rb = Rulebook::build(&m, 3).unwrap();
            let x = Tensor::matrix(m.len(), ci, m.features().to_vec()).unwrap();
            let r = normal_tensor(&[m.len(), co], 1.0, &mut rng);
            let loss = |s: &ParamStore, x: &Tensor| -> f64 {
                let y = block.forward(s, &buffers, x, &rb, Mode::Train).unwrap().y;
                y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            let out = block.forward(&store, &buffers, &x, &rb, Mode::Train).unwrap();
            let (gx, grads) = block.backward(&store, out.cache.as_ref().unwrap(), &r, &rb).unwrap();
            let nx = finite_diff_grad(|t| loss(&store, t), &x, 1e-5);
            assert!(max_relative_error(gx.data(), nx.data()) < 1e-4);
            for (name, g) in grads {
                let num = finite_diff_grad(
                    |t| {
                        let mut s = store.clone();
                        *s.value_mut(&name) = t.clone();
                        loss(&s, &x)
                    },
                    store.value(&name),
                    1e-5,
                );
                let err = max_relative_error(g.data(), num.data());
                assert!(err < 1e-4, "{name}: {err}");
            }
        }
    }
}
