//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.

mod adam;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{broadcast_shapes, Graph, Var};
pub use params::{xavier_uniform, Bound, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
