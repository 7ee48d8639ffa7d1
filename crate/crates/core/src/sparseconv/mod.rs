//! Submanifold sparse convolutional pooling network.
//!
//! Several sparse maps are processed together as one batch: their sites are
//! stacked into a single feature matrix and a single [`Rulebook`] keyed by
//! `(map, site)`, so neighbourhoods never cross map boundaries.

mod batchnorm;
mod block;
mod conv;
mod network;
mod rulebook;

pub use batchnorm::{batchnorm_backward, batchnorm_eval, batchnorm_train, BatchNormState, BatchStats, BnCache, Mode};
pub use block::{BlockCache, BlockOutput, ResidualBlock};
pub use conv::{submconv_backward, submconv_forward, submconv_forward_map, ConvGrads};
pub use network::{
    global_average_pool, segment_mean, segment_mean_backward, stack_maps, BnBuffers, PoolTrace, PoolingNetwork,
    PoolingNetworkConfig, Segment,
};
pub use rulebook::Rulebook;

/// Named gradient tensors produced by a backward pass.
pub type Grads = Vec<(String, crate::numcore::Tensor)>;
