//! Dense tensors, reverse-mode autodiff, parameters, Adam and checkpoints.

mod adam;
pub mod checkpoint;
mod graph;
mod params;
mod real;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use graph::{AttnShape, Gradients, Graph, Spatial, Var};
pub use params::{Param, ParameterStore};
pub use real::{DType, Real};
pub use tensor::Tensor;
