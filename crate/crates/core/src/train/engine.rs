use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::derive_seed;
use crate::matrix::Matrix;
use crate::projector::{DecompositionCounters, SharedSubspaceCache};
use crate::train::model::{loss_and_grad, Model, ModelConfig};
use crate::train::optim::{Optimizer, OptimizerConfig};
use crate::train::store::{ActivationStore, ForwardContext};
use crate::train::task::{SyntheticTask, TaskConfig};
use crate::train::CompressionPolicy;

/// Everything except the compression policy that defines a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub optimizer: OptimizerConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate(&self.model)?;
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub act_scalars: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps_requested: u64,
    pub steps_completed: u64,
    /// Loss on the last step; `None` when the run diverged.
    pub final_loss: Option<f64>,
    pub peak_activation_scalars: u64,
    pub diverged: bool,
    /// Step at which the loss or gradients became non-finite.
    pub diverged_at: Option<u64>,
    pub svd_count: u64,
    pub qr_count: u64,
    /// Decompositions per activation key.
    pub decompositions: BTreeMap<String, (u64, u64)>,
    /// Scalars stored per activation row on the last completed step.
    pub storage_rows: BTreeMap<String, u64>,
    /// Scalars held by projection bases (not counted as activations).
    pub basis_scalars: u64,
}

/// Per-step records plus a summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
}

impl RunMetrics {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean loss over the last `window` completed steps; infinite when diverged.
    pub fn tail_loss(&self, window: usize) -> f64 {
        if self.summary.diverged {
            return f64::INFINITY;
        }
        let start = self.records.len().saturating_sub(window);
        let tail = &self.records[start..];
        if tail.is_empty() {
            return f64::INFINITY;
        }
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
    }
}

/// One trainer: model, optimizer, data and subspace state.
pub struct Trainer {
    pub model: Model,
    policy: CompressionPolicy,
    optimizer: Optimizer,
    task: SyntheticTask,
    cache: SharedSubspaceCache,
    store: ActivationStore,
}

/// Seeds for the model, data and projections, all derived from one run seed.
pub fn run_seeds(seed: u64) -> (u64, u64, u64) {
    (
        derive_seed(seed, 1),
        derive_seed(seed, 2),
        derive_seed(seed, 3),
    )
}

impl Trainer {
    pub fn new(config: &TrainConfig, policy: &CompressionPolicy, seed: u64) -> Result<Self> {
        config.validate()?;
        policy.validate()?;
        let (model_seed, data_seed, projection_seed) = run_seeds(seed);
        let mut policy = *policy;
        policy.seed = derive_seed(projection_seed, policy.seed);
        Ok(Self {
            model: Model::mlp_block(config.model, model_seed)?,
            policy,
            optimizer: Optimizer::new(config.optimizer)?,
            task: SyntheticTask::new(config.task, &config.model, data_seed)?,
            cache: SharedSubspaceCache::new(),
            store: ActivationStore::new(),
        })
    }

    /// Forward with storage and backward on batch `t`; returns the loss and
    /// the parameter gradients without applying them.
    pub fn compute_gradients(&mut self, t: u64) -> Result<(f64, Vec<Matrix>)> {
        let (x, targets) = self.task.batch(t)?;
        self.store.begin_step(t);
        self.cache.begin_step(t);
        let pred = {
            let mut ctx = ForwardContext {
                policy: &self.policy,
                cache: &mut self.cache,
                store: &mut self.store,
            };
            self.model.forward_store(&x, &mut ctx)?
        };
        let (loss, grad) = loss_and_grad(&pred, &targets)?;
        if !loss.is_finite() {
            return Err(Error::TrainingFault(format!("non-finite loss at step {t}")));
        }
        let grads = self.model.backward(&grad, &self.store, t)?;
        Ok((loss, grads))
    }

    pub fn apply(&mut self, grads: &[Matrix]) -> Result<()> {
        self.optimizer.step(self.model.params_mut(), grads)
    }

    pub fn store(&self) -> &ActivationStore {
        &self.store
    }

    pub fn cache(&self) -> &SharedSubspaceCache {
        &self.cache
    }
}

fn global_norm(grads: &[Matrix]) -> f64 {
    grads
        .iter()
        .map(Matrix::frobenius_norm_sq)
        .sum::<f64>()
        .sqrt()
}

/// Trains for `steps` steps. A non-finite loss, activation or gradient halts
/// the run and is reported through `summary.diverged`; other errors propagate.
pub fn train(
    config: &TrainConfig,
    policy: &CompressionPolicy,
    steps: u64,
    seed: u64,
) -> Result<RunMetrics> {
    let mut trainer = Trainer::new(config, policy, seed)?;
    let start = Instant::now();
    let mut records = Vec::with_capacity(steps as usize);
    let mut diverged_at = None;
    let mut storage_rows = BTreeMap::new();

    for t in 0..steps {
        let outcome = trainer.compute_gradients(t).and_then(|(loss, grads)| {
            let norm = global_norm(&grads);
            if !norm.is_finite() {
                return Err(Error::TrainingFault(format!(
                    "non-finite gradient at step {t}"
                )));
            }
            trainer.apply(&grads)?;
            Ok((loss, norm))
        });
        let (loss, grad_norm) = match outcome {
            Ok(v) => v,
            Err(Error::TrainingFault(_)) => {
                diverged_at = Some(t);
                break;
            }
            Err(e) => return Err(e),
        };
        storage_rows = trainer.store.breakdown();
        records.push(StepRecord {
            step: t,
            loss,
            grad_norm,
            act_scalars: storage_rows.values().sum(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    let cache = trainer.cache();
    let totals: DecompositionCounters = cache.total_counters();
    let decompositions = cache
        .keys()
        .map(|k| {
            let c = cache.counters(k).unwrap_or_default();
            (k.to_string(), (c.svd, c.qr))
        })
        .collect();
    let summary = RunSummary {
        steps_requested: steps,
        steps_completed: records.len() as u64,
        final_loss: if diverged_at.is_some() {
            None
        } else {
            records.last().map(|r| r.loss)
        },
        peak_activation_scalars: records.iter().map(|r| r.act_scalars).max().unwrap_or(0),
        diverged: diverged_at.is_some(),
        diverged_at,
        svd_count: totals.svd,
        qr_count: totals.qr,
        decompositions,
        storage_rows,
        basis_scalars: cache.basis_storage_scalars() as u64,
    };
    Ok(RunMetrics { records, summary })
}

/// The PAC/RAC/PRAC comparison task: a noise-free teacher on inputs with a
/// rank-3 head (scale 3) and a flat tail (scale 0.5) over 20 dimensions,
/// trained by SGD near its stability limit.
pub fn ablation_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            input_dim: 20,
            hidden_dim: 40,
            output_dim: 20,
            heads: 1,
            layer_norm: false,
            residual: false,
            init_scale: 1.0,
        },
        task: TaskConfig {
            batch: 8,
            seq_len: 8,
            head_rank: 3,
            head_scale: 3.0,
            tail_scale: 0.5,
            tail_decay: 1.0,
            ..TaskConfig::default()
        },
        optimizer: OptimizerConfig::Sgd { lr: 1.5 },
    }
}

/// Policy for the comparison: principal subspace refreshed every 50 steps,
/// random subspace every step. `budget_scale` multiplies both rank fractions
/// (0.5 halves the total rank).
pub fn ablation_policy(
    mode: crate::train::CompressionMode,
    budget_scale: f64,
) -> CompressionPolicy {
    CompressionPolicy {
        mode,
        linear_rank_fraction: 0.3 * budget_scale,
        nonlinear_rank_fraction: 0.2 * budget_scale,
        principal_interval: 50,
        random_interval: 1,
        ..CompressionPolicy::default()
    }
}

/// Steps per ablation run.
pub const ABLATION_STEPS: u64 = 2000;
