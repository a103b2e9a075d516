//! Minimal reverse-mode training engine that stores compressed activations
//! and reconstructs them for the backward pass.

pub mod demos;
mod engine;
pub mod layers;
pub mod model;
pub mod optim;
mod policy;
mod store;
pub mod task;

pub use engine::{
    ablation_config, ablation_policy, run_seeds, train, RunMetrics, RunSummary, StepRecord,
    TrainConfig, Trainer, ABLATION_STEPS,
};
pub use layers::Layer;
pub use model::{keys, loss_and_grad, Model, ModelConfig, Targets};
pub use optim::{adam_step, sgd_step, AdamState, Optimizer, OptimizerConfig};
pub use policy::{CompressionMode, CompressionPolicy, LayerKind};
pub use store::{ActivationStore, ForwardContext, NormStats, StoredActivation, StoredTensor};
pub use task::{SyntheticTask, TaskConfig, TaskKind};
