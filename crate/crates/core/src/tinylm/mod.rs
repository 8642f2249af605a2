//! Minimal deterministic GQA transformer: init, cached forward, greedy
//! decoding, training and checkpoints.

pub mod checkpoint;
mod config;
mod forward;
mod model;
mod tokens;
mod train;

pub use config::ModelConfig;
pub use forward::{ForwardOutput, LayerCapture};
pub use model::{init_model, LayerWeights, Model, Weights, INIT_GAIN};
pub use tokens::{special, Role, TokenSeq};
pub use train::{
    batch_gradient, mean_loss, train, training_logits, SampleSource, TrainOptions, TrainReport, TrainingSample,
};
