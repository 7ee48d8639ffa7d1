use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BatchNormState, BatchStats, BlockCache, Grads, Mode, ResidualBlock, Rulebook};
use crate::error::{Error, Result};
use crate::numcore::linear::{linear_backward, linear_forward, normal_tensor};
use crate::numcore::{ParamStore, Tensor};
use crate::sparsemap::SparseMap;

/// Running statistics of every batch-norm layer, keyed by layer name.
pub type BnBuffers = BTreeMap<String, BatchNormState>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingNetworkConfig {
    /// Tile-embedding width `F`.
    pub in_channels: usize,
    /// Output width of each residual block; its length is the block count.
    pub block_channels: Vec<usize>,
    pub kernel_size: usize,
    /// Width of the pooled representation.
    pub out_dim: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl PoolingNetworkConfig {
    /// Two 64-wide blocks, 3×3 kernels, 64-dimensional output.
    pub fn with_defaults(in_channels: usize) -> Self {
        PoolingNetworkConfig {
            in_channels,
            block_channels: vec![64, 64],
            kernel_size: 3,
            out_dim: 64,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn blocks(&self) -> usize {
        self.block_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if self.in_channels == 0 || self.out_dim == 0 || self.block_channels.contains(&0) {
            return Err(Error::config("all channel widths must be >= 1"));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("batch-norm eps must be > 0 and momentum in [0, 1]"));
        }
        Ok(())
    }
}

/// Contiguous rows of the stacked feature matrix belonging to one map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Stacks the features of several maps into one `[Σ sites, F]` matrix.
pub fn stack_maps(maps: &[SparseMap]) -> Result<(Tensor, Vec<Segment>)> {
    let first = maps.first().ok_or(Error::EmptyBag)?;
    let f = first.feat_dim();
    let mut data = Vec::new();
    let mut segments = Vec::with_capacity(maps.len());
    for m in maps {
        if m.feat_dim() != f {
            return Err(Error::DimensionMismatch {
                expected: f,
                found: m.feat_dim(),
            });
        }
        segments.push(Segment {
            start: data.len() / f,
            len: m.len(),
        });
        data.extend_from_slice(m.features());
    }
    let n = data.len() / f;
    Ok((Tensor::matrix(n, f, data)?, segments))
}

/// Mean over the rows of each segment.
pub fn segment_mean(x: &Tensor, segments: &[Segment]) -> Result<Tensor> {
    let c = x.cols();
    let mut out = Vec::with_capacity(segments.len() * c);
    for s in segments {
        if s.len == 0 {
            return Err(Error::EmptyBag);
        }
        let mut acc = vec![0.0; c];
        for r in s.start..s.start + s.len {
            for (a, v) in acc.iter_mut().zip(x.row(r)) {
                *a += v;
            }
        }
        out.extend(acc.into_iter().map(|a| a / s.len as f64));
    }
    Tensor::matrix(segments.len(), c, out)
}

pub fn segment_mean_backward(grad: &Tensor, segments: &[Segment], n_rows: usize) -> Tensor {
    let c = grad.cols();
    let mut g = Tensor::zeros(&[n_rows, c]);
    for (k, s) in segments.iter().enumerate() {
        let inv = 1.0 / s.len as f64;
        for r in s.start..s.start + s.len {
            for (a, v) in g.row_mut(r).iter_mut().zip(grad.row(k)) {
                *a = v * inv;
            }
        }
    }
    g
}

/// Element-wise mean of a map's features.
pub fn global_average_pool(map: &SparseMap) -> Result<Vec<f64>> {
    let x = Tensor::matrix(map.len(), map.feat_dim(), map.features().to_vec())?;
    let seg = [Segment {
        start: 0,
        len: map.len(),
    }];
    Ok(segment_mean(&x, &seg)?.into_data())
}

/// Everything a backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct PoolTrace {
    rulebook: Rulebook,
    segments: Vec<Segment>,
    blocks: Option<Vec<BlockCache>>,
    pooled: Tensor,
    n_sites: usize,
    /// Batch statistics per batch-norm layer (train mode only).
    pub stats: Vec<(String, BatchStats)>,
}

impl PoolTrace {
    /// Smallest distance of any ReLU input to the kink at zero (train mode only).
    pub fn kink_margin(&self) -> f64 {
        self.blocks.iter().flatten().fold(f64::INFINITY, |m, b| m.min(b.kink_margin()))
    }

    /// Pooled block output, before the final linear layer.
    pub fn pooled(&self) -> &Tensor {
        &self.pooled
    }
}

/// Residual blocks → global average pool → linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingNetwork {
    config: PoolingNetworkConfig,
    blocks: Vec<ResidualBlock>,
    head_w: String,
    head_b: String,
}

impl PoolingNetwork {
    pub fn new(config: PoolingNetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::new();
        let mut width = config.in_channels;
        for (k, &c) in config.block_channels.iter().enumerate() {
            blocks.push(ResidualBlock::new(&format!("pool.block{k}"), width, c, config.kernel_size));
            width = c;
        }
        Ok(PoolingNetwork {
            config,
            blocks,
            head_w: "pool.head.w".into(),
            head_b: "pool.head.b".into(),
        })
    }

    pub fn config(&self) -> &PoolingNetworkConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    fn last_width(&self) -> usize {
        self.config.block_channels.last().copied().unwrap_or(self.config.in_channels)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, buffers: &mut BnBuffers, rng: &mut R) {
        for b in &self.blocks {
            b.init(store, buffers, self.config.bn_momentum, self.config.bn_eps, rng);
        }
        let w = self.last_width();
        store.insert(&self.head_w, normal_tensor(&[w, self.config.out_dim], (1.0 / w as f64).sqrt(), rng));
        store.insert(&self.head_b, Tensor::zeros(&[self.config.out_dim]));
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.blocks.iter().flat_map(|b| b.param_names()).collect();
        names.push(self.head_w.clone());
        names.push(self.head_b.clone());
        names
    }

    /// Embeds each map into one `out_dim` row. In train mode batch-norm
    /// statistics are pooled over the active sites of all maps.
    pub fn forward(&self, store: &ParamStore, buffers: &BnBuffers, maps: &[SparseMap], mode: Mode) -> Result<(Tensor, PoolTrace)> {
        let (x, segments) = stack_maps(maps)?;
        if x.cols() != self.config.in_channels {
            return Err(Error::DimensionMismatch {
                expected: self.config.in_channels,
                found: x.cols(),
            });
        }
        let rulebook = Rulebook::build_batch(maps, self.config.kernel_size)?;
        self.forward_features(store, buffers, x, segments, rulebook, mode)
    }

    /// Forward pass over an already stacked feature matrix.
    pub fn forward_features(
        &self,
        store: &ParamStore,
        buffers: &BnBuffers,
        x: Tensor,
        segments: Vec<Segment>,
        rulebook: Rulebook,
        mode: Mode,
    ) -> Result<(Tensor, PoolTrace)> {
        if rulebook.n_sites() != x.rows() || rulebook.kernel_size() != self.config.kernel_size {
            return Err(Error::StaleRulebook);
        }
        let n_sites = x.rows();
        let mut h = x;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut stats = Vec::new();
        for b in &self.blocks {
            let out = b.forward(store, buffers, &h, &rulebook, mode)?;
            caches.push(out.cache);
            stats.extend(out.stats);
            h = out.y;
        }
        let pooled = segment_mean(&h, &segments)?;
        let y = linear_forward(&pooled, store.value(&self.head_w), store.value(&self.head_b))?;
        let blocks = caches.into_iter().collect::<Option<Vec<_>>>();
        Ok((
            y,
            PoolTrace {
                rulebook,
                segments,
                blocks,
                pooled,
                n_sites,
                stats,
            },
        ))
    }

    /// Returns the gradient w.r.t. the stacked input features and the named
    /// parameter gradients. Requires a train-mode trace.
    pub fn backward(&self, store: &ParamStore, trace: &PoolTrace, grad_out: &Tensor) -> Result<(Tensor, Grads)> {
        let caches = trace.blocks.as_ref().ok_or(Error::NoForwardCache)?;
        if grad_out.rows() != trace.segments.len() || grad_out.cols() != self.config.out_dim {
            return Err(Error::DimensionMismatch {
                expected: trace.segments.len() * self.config.out_dim,
                found: grad_out.len(),
            });
        }
        let mut grads = Grads::new();
        let (g_pooled, g_w, g_b) = linear_backward(&trace.pooled, store.value(&self.head_w), grad_out);
        grads.push((self.head_w.clone(), g_w));
        grads.push((self.head_b.clone(), g_b));
        let mut g = segment_mean_backward(&g_pooled, &trace.segments, trace.n_sites);
        for (b, cache) in self.blocks.iter().zip(caches).rev() {
            let (g_in, block_grads) = b.backward(store, cache, &g, &trace.rulebook)?;
            grads.extend(block_grads);
            g = g_in;
        }
        Ok((g, grads))
    }

    /// Folds a train-mode trace's batch statistics into the running stats.
    pub fn update_running_stats(&self, buffers: &mut BnBuffers, trace: &PoolTrace) {
        for (name, s) in &trace.stats {
            if let Some(state) = buffers.get_mut(name) {
                state.update(s);
            }
        }
    }

    /// Single-map embedding with running statistics.
    pub fn pool_forward(&self, store: &ParamStore, buffers: &BnBuffers, map: &SparseMap) -> Result<Vec<f64>> {
        let (y, _) = self.forward(store, buffers, std::slice::from_ref(map), Mode::Eval)?;
        Ok(y.into_data())
    }
}
