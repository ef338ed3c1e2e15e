//! Pitch, energy and duration predictors composed as a cascade with residual
//! conditioning, or as one joint 3-channel model.

mod config;
mod experiment;
mod model;

pub use config::{CascadeMode, CascadeSpec, ProjectionInit};
pub use experiment::{
    evaluate_js, order_experiment, order_specs, sweep_cascade, utterance_seed, EvalConfig, JsEvaluation, OrderRow, OrderTable,
    ORDER_CONFIGURATIONS,
};
pub use model::{
    corpus_examples, Cascade, CascadeExample, CascadeLog, CascadeOptimizer, InferenceTrace, Stage, StageRngs,
    StageTarget,
};

#[cfg(test)]
mod tests;
