//! Dense tensors, the parameter registry with Adam, the finite-difference
//! oracle, the MLP projector and checkpoint persistence.

mod adam;
pub mod checkpoint;
mod finite_diff;
pub mod linear;
mod tensor;

pub use adam::{adam_step, AdamConfig, Param, ParamStore};
pub use finite_diff::{finite_diff_grad, max_relative_error, relative_error};
pub use linear::{MlpProjector, ProjectorCache, ProjectorGrads, DEFAULT_PROJ_DIM};
pub use tensor::Tensor;
