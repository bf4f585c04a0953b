//! Tiny decoder-only transformer with RoPE attention, trained in double
//! precision with hand-derived gradients.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod params;
pub mod train;
pub mod transformer;

pub use config::ModelConfig;
pub use optim::{adamw_step, AdamWConfig, LrSchedule, OptimizerState};
pub use params::{ParamBuffer, ParamLayout, ParameterSet};
pub use train::{sample_batch, train, TrainBatch, TrainConfig, TrainOutcome};
pub use transformer::{backward, forward, loss_and_grad, loss_next_token, Inputs, Transformer};
