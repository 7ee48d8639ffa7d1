use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::numcore::checkpoint::Checkpoint;
use crate::numcore::{MlpProjector, ParamStore, Tensor};
use crate::seeding;
use crate::sparseconv::{BatchNormState, BnBuffers, Mode, PoolingNetwork, PoolingNetworkConfig};
use crate::sparsemap::SparseMap;

/// Pooling network plus projector, with parameters, optimizer moments and
/// batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Model {
    pub network: PoolingNetwork,
    pub projector: MlpProjector,
    pub store: ParamStore,
    pub buffers: BnBuffers,
}

/// JSON header stored in a model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub network: PoolingNetworkConfig,
    pub proj_dim: usize,
    pub train: TrainConfig,
    pub epochs_completed: usize,
    pub losses: Vec<f64>,
}

impl CheckpointHeader {
    /// Tiles per view used in training.
    pub fn train_tiles(&self) -> usize {
        self.train.tiles
    }
}

const STEP_KEY: &str = "adam.t";

impl Model {
    pub fn new(network: PoolingNetworkConfig, proj_dim: usize, seed: u64) -> Result<Self> {
        let out_dim = network.out_dim;
        let network = PoolingNetwork::new(network)?;
        let projector = MlpProjector::new("proj", out_dim, proj_dim);
        let mut store = ParamStore::new();
        let mut buffers = BnBuffers::new();
        let mut rng = seeding::rng(seed, seeding::tag::INIT);
        network.init(&mut store, &mut buffers, &mut rng);
        projector.init(&mut store, &mut rng);
        store.round_to_f32();
        Ok(Model {
            network,
            projector,
            store,
            buffers,
        })
    }

    /// Builds the network described by a training configuration for
    /// `in_channels`-dimensional tile embeddings.
    pub fn for_training(cfg: &TrainConfig, in_channels: usize) -> Result<Self> {
        let net = PoolingNetworkConfig {
            in_channels,
            block_channels: cfg.block_channels.clone(),
            kernel_size: cfg.kernel_size,
            out_dim: cfg.out_dim,
            ..PoolingNetworkConfig::with_defaults(in_channels)
        };
        Self::new(net, cfg.proj_dim, cfg.seed)
    }

    /// Pooled (pre-projector) representations of each map, using running
    /// batch-norm statistics.
    pub fn represent(&self, maps: &[SparseMap]) -> Result<Tensor> {
        Ok(self.network.forward(&self.store, &self.buffers, maps, Mode::Eval)?.0)
    }

    pub fn to_checkpoint(&self, header: &CheckpointHeader) -> Result<Checkpoint> {
        let header = serde_json::to_string(header).map_err(|e| Error::Format(e.to_string()))?;
        let mut arrays = Vec::new();
        for (name, p) in self.store.iter() {
            arrays.push((name.to_string(), p.value.clone()));
            arrays.push((format!("{name}.m"), p.m.clone()));
            arrays.push((format!("{name}.v"), p.v.clone()));
        }
        for (name, s) in &self.buffers {
            arrays.push((format!("{name}.running_mean"), Tensor::vector(s.running_mean.clone())));
            arrays.push((format!("{name}.running_var"), Tensor::vector(s.running_var.clone())));
        }
        arrays.push((STEP_KEY.to_string(), Tensor::vector(vec![self.store.step() as f64])));
        Ok(Checkpoint { header, arrays })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, CheckpointHeader)> {
        let header: CheckpointHeader =
            serde_json::from_str(&ckpt.header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut model = Model::new(header.network.clone(), header.proj_dim, 0)?;
        let get = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = ckpt
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t.clone())
        };
        let names: Vec<String> = model.store.names().map(String::from).collect();
        for name in names {
            let shape = model.store.value(&name).shape().to_vec();
            let p = model.store.param_mut(&name);
            p.value = get(&name, &shape)?;
            p.m = get(&format!("{name}.m"), &shape)?;
            p.v = get(&format!("{name}.v"), &shape)?;
        }
        let keys: Vec<String> = model.buffers.keys().cloned().collect();
        for key in keys {
            let c = model.buffers[&key].running_mean.len();
            let state: &mut BatchNormState = model.buffers.get_mut(&key).expect("key listed");
            state.running_mean = get(&format!("{key}.running_mean"), &[c])?.into_data();
            state.running_var = get(&format!("{key}.running_var"), &[c])?.into_data();
        }
        let step = get(STEP_KEY, &[1])?.data()[0];
        model.store.set_step(step as u64);
        Ok((model, header))
    }

    pub fn save(&self, header: &CheckpointHeader, path: &Path) -> Result<()> {
        self.to_checkpoint(header)?.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
