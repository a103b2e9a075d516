use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{derive_seed, sample_gaussian};
use crate::matrix::Matrix;
use crate::train::layers::{Layer, LinearGroup};
use crate::train::store::{ActivationStore, ForwardContext};

/// Activation keys used by the MLP block; they double as memory-ledger rows.
pub mod keys {
    pub const NORM_INPUT: &str = "ln2.input";
    pub const NORM_STATS: &str = "ln2.stats";
    pub const UP_INPUT: &str = "mlp.up.input";
    pub const GELU_INPUT: &str = "mlp.gelu.input";
    pub const DOWN_INPUT: &str = "mlp.down.input";
    pub const RESIDUAL: &str = "mlp.residual";
}

/// Shape of the MLP block:
/// `[LayerNorm] -> Linear(n, m) -> GeLU -> Linear(m, p)`, optionally wrapped
/// in a residual connection (which requires `p = n`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// Number of up-projection heads sharing the block input.
    pub heads: usize,
    pub layer_norm: bool,
    pub residual: bool,
    /// Weights are drawn from `N(0, init_scale^2 / fan_in)`.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 20,
            hidden_dim: 40,
            output_dim: 20,
            heads: 1,
            layer_norm: true,
            residual: true,
            init_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Parameter("model dimensions must be positive".into()));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Parameter(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.residual && self.output_dim != self.input_dim {
            return Err(Error::Parameter(
                "a residual block needs output_dim = input_dim".into(),
            ));
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return Err(Error::Parameter("init_scale must be positive".into()));
        }
        Ok(())
    }
}

/// A stack of layers trained end to end.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
}

fn init_weight(rows: usize, cols: usize, scale: f64, seed: u64) -> Matrix {
    sample_gaussian(rows, cols, seed).scale(scale / (rows as f64).sqrt())
}

impl Model {
    pub fn mlp_block(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            input_dim: n,
            hidden_dim: m,
            output_dim: p,
            heads,
            init_scale,
            ..
        } = config;
        let mut inner = Vec::new();
        if config.layer_norm {
            inner.push(Layer::layer_norm(keys::NORM_INPUT, keys::NORM_STATS, n));
        }
        let up = if heads == 1 {
            Layer::linear(
                keys::UP_INPUT,
                init_weight(n, m, init_scale, derive_seed(seed, 0)),
            )
        } else {
            Layer::LinearGroup(LinearGroup {
                key: keys::UP_INPUT.to_string(),
                weights: (0..heads)
                    .map(|h| {
                        init_weight(n, m / heads, init_scale, derive_seed(seed, 10 + h as u64))
                    })
                    .collect(),
            })
        };
        inner.push(up);
        inner.push(Layer::gelu(keys::GELU_INPUT));
        inner.push(Layer::linear(
            keys::DOWN_INPUT,
            init_weight(m, p, init_scale, derive_seed(seed, 1)),
        ));
        let layers = if config.residual {
            vec![Layer::Residual(crate::train::layers::Residual { inner })]
        } else {
            inner
        };
        Ok(Self { config, layers })
    }

    pub fn forward_store(&self, x: &Matrix, ctx: &mut ForwardContext<'_>) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward_store(&h, ctx)?;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Parameter gradients in [`Model::params`] order.
    pub fn backward(
        &self,
        grad_out: &Matrix,
        store: &ActivationStore,
        step: u64,
    ) -> Result<Vec<Matrix>> {
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for layer in self.layers.iter().rev() {
            let mut own = Vec::new();
            g = layer.backward_recover(&g, store, step, &mut own)?;
            per_layer.push(own);
        }
        Ok(per_layer.into_iter().rev().flatten().collect())
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }
}

/// Training objective.
#[derive(Debug, Clone)]
pub enum Targets {
    /// Regression targets, scored by mean squared error over all entries.
    Dense(Matrix),
    /// Class labels, scored by mean softmax cross-entropy over rows.
    Labels(Vec<usize>),
}

/// Loss value and its gradient with respect to `pred`.
pub fn loss_and_grad(pred: &Matrix, targets: &Targets) -> Result<(f64, Matrix)> {
    match targets {
        Targets::Dense(y) => {
            if y.shape() != pred.shape() {
                return Err(crate::error::shape_err(
                    "mse_loss",
                    format!("{}x{}", pred.rows(), pred.cols()),
                    format!("{}x{}", y.rows(), y.cols()),
                ));
            }
            let diff = pred.sub(y);
            let count = diff.len() as f64;
            let loss = diff.frobenius_norm_sq() / count;
            Ok((loss, diff.scale(2.0 / count)))
        }
        Targets::Labels(labels) => {
            if labels.len() != pred.rows() {
                return Err(crate::error::shape_err(
                    "cross_entropy",
                    format!("{} labels", pred.rows()),
                    format!("{} labels", labels.len()),
                ));
            }
            let rows = pred.rows() as f64;
            let mut grad = Matrix::zeros(pred.rows(), pred.cols());
            let mut loss = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                if label >= pred.cols() {
                    return Err(Error::Data(format!(
                        "label {label} out of range for {} classes",
                        pred.cols()
                    )));
                }
                let row = pred.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                loss += z.ln() + max - row[label];
                for (j, e) in exps.iter().enumerate() {
                    let p = e / z;
                    let target = if j == label { 1.0 } else { 0.0 };
                    grad.set(i, j, (p - target) / rows);
                }
            }
            Ok((loss / rows, grad))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            output_dim: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mse_gradient() {
        let pred = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let y = Matrix::from_rows(&[[0.0, 4.0]]).unwrap();
        let (loss, g) = loss_and_grad(&pred, &Targets::Dense(y)).unwrap();
        assert_eq!(loss, 2.5);
        assert_eq!(g, Matrix::from_rows(&[[1.0, -2.0]]).unwrap());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let pred = Matrix::zeros(2, 4);
        let (loss, g) = loss_and_grad(&pred, &Targets::Labels(vec![0, 3])).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((g.get(0, 0) - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((g.get(1, 0) - 0.125).abs() < 1e-12);
        assert!(loss_and_grad(&pred, &Targets::Labels(vec![0, 4])).is_err());
    }
}
