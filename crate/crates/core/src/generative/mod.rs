//! Stochastic back-ends (normalizing flow, flow matching, rectified flow) and
//! the deterministic baseline behind one train/sample interface.

mod io;
mod model;
mod path;
mod reflow;
mod solver;
mod train;

pub use io::load_named;
pub(crate) use io::named_params;
pub use model::{
    repeat_condition, FlowModel, ModelConfig, ModelField, ModelKind, Network, SamplerConfig, TrainingMeta,
};
pub use path::{lift_contour, ot_path, ot_path_batch, unlift_contour};
pub use reflow::{reflow, ReflowConfig};
pub use solver::{euler_solve, euler_trajectory, VectorField};
pub use train::{clip_grad_norm, pad_batch, train_model, Example, TrainConfig, TrainLog};
pub(crate) use train::sample_indices;

#[cfg(test)]
mod tests;
