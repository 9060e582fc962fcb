//! Minimal differentiable-computation engine.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod layers;
mod param;
mod tensor;

pub use adam::{clip_grad_norm, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use graph::{Graph, Var};
pub use layers::{GruCell, Linear, Mlp2};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
