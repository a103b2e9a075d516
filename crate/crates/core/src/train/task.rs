use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{derive_seed, sample_gaussian, thin_qr};
use crate::matrix::Matrix;
use crate::train::model::{Model, ModelConfig, Targets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Mean squared error against a teacher network's outputs.
    Regression,
    /// Softmax cross-entropy against the teacher's argmax class.
    Classification,
}

/// Teacher-student task whose inputs have a low-rank-plus-tail spectrum.
///
/// Each row is `z diag(spectrum) B^T` with `z ~ N(0, I)` and a fixed random
/// orthogonal `B`. The spectrum is `head_scale` on the first `head_rank`
/// directions, then `tail_scale * tail_decay^j` on the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Sequences per batch.
    pub batch: usize,
    /// Tokens per sequence; a batch has `batch * seq_len` rows.
    pub seq_len: usize,
    pub head_rank: usize,
    pub head_scale: f64,
    pub tail_scale: f64,
    pub tail_decay: f64,
    /// Init scale of the teacher network.
    pub teacher_scale: f64,
    /// Standard deviation of Gaussian noise on regression targets.
    pub noise: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Regression,
            batch: 8,
            seq_len: 8,
            head_rank: 2,
            head_scale: 4.0,
            tail_scale: 0.5,
            tail_decay: 1.0,
            teacher_scale: 1.0,
            noise: 0.0,
        }
    }
}

impl TaskConfig {
    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch == 0 || self.seq_len == 0 {
            return Err(Error::Parameter(
                "batch and seq_len must be positive".into(),
            ));
        }
        if self.head_rank > model.input_dim {
            return Err(Error::Parameter(format!(
                "head_rank {} exceeds input_dim {}",
                self.head_rank, model.input_dim
            )));
        }
        for (name, v) in [
            ("head_scale", self.head_scale),
            ("tail_scale", self.tail_scale),
            ("tail_decay", self.tail_decay),
            ("teacher_scale", self.teacher_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Parameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Parameter("noise must be >= 0".into()));
        }
        Ok(())
    }

    pub fn spectrum(&self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                if i < self.head_rank {
                    self.head_scale
                } else {
                    self.tail_scale * self.tail_decay.powi((i - self.head_rank) as i32)
                }
            })
            .collect()
    }
}

/// Deterministic stream of batches: batch `t` depends only on the seed and `t`.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    config: TaskConfig,
    /// `diag(spectrum) B^T`.
    mixing: Matrix,
    teacher: Model,
    seed: u64,
}

impl SyntheticTask {
    pub fn new(config: TaskConfig, model: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate(model)?;
        let n = model.input_dim;
        let basis = thin_qr(&sample_gaussian(n, n, derive_seed(seed, 0)))?;
        let spectrum = config.spectrum(n);
        let mixing = Matrix::from_fn(n, n, |i, j| spectrum[i] * basis.get(j, i));
        let teacher_config = ModelConfig {
            init_scale: config.teacher_scale,
            ..*model
        };
        let teacher = Model::mlp_block(teacher_config, derive_seed(seed, 1))?;
        Ok(Self {
            config,
            mixing,
            teacher,
            seed: derive_seed(seed, 2),
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn batch(&self, step: u64) -> Result<(Matrix, Targets)> {
        let stream = derive_seed(self.seed, step);
        let rows = self.config.rows();
        let z = sample_gaussian(rows, self.mixing.rows(), derive_seed(stream, 0));
        let x = z.matmul(&self.mixing);
        let out = self.teacher.forward(&x)?;
        let targets = match self.config.kind {
            TaskKind::Regression => {
                let mut y = out;
                if self.config.noise > 0.0 {
                    y.axpy(
                        self.config.noise,
                        &sample_gaussian(y.rows(), y.cols(), derive_seed(stream, 1)),
                    );
                }
                Targets::Dense(y)
            }
            TaskKind::Classification => Targets::Labels(
                (0..out.rows())
                    .map(|i| {
                        out.row(i)
                            .iter()
                            .enumerate()
                            .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                                if v > best.1 {
                                    (j, v)
                                } else {
                                    best
                                }
                            })
                            .0
                    })
                    .collect(),
            ),
        };
        Ok((x, targets))
    }
}
