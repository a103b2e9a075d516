use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;

fn check_grad(param: &Matrix, grad: &Matrix) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(shape_err(
            "optimizer step",
            format!("{}x{}", param.rows(), param.cols()),
            format!("{}x{}", grad.rows(), grad.cols()),
        ));
    }
    if !grad.is_finite() {
        return Err(Error::TrainingFault("non-finite gradient".into()));
    }
    Ok(())
}

/// `param <- param - lr * grad`.
pub fn sgd_step(param: &mut Matrix, grad: &Matrix, lr: f64) -> Result<()> {
    check_grad(param, grad)?;
    param.axpy(-lr, grad);
    Ok(())
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first: Matrix,
    pub second: Matrix,
    pub steps: u64,
}

impl AdamState {
    pub fn zeros_like(param: &Matrix) -> Self {
        Self {
            first: Matrix::zeros(param.rows(), param.cols()),
            second: Matrix::zeros(param.rows(), param.cols()),
            steps: 0,
        }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check_grad(param, grad)?;
    state.steps += 1;
    let c1 = 1.0 - beta1.powi(state.steps as i32);
    let c2 = 1.0 - beta2.powi(state.steps as i32);
    let p = param.as_mut_slice();
    let m = state.first.as_mut_slice();
    let v = state.second.as_mut_slice();
    for (i, &g) in grad.as_slice().iter().enumerate() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::Sgd { lr: 0.05 }
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = match *self {
            Self::Sgd { lr } => lr,
            Self::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                    return Err(Error::Parameter(
                        "Adam needs 0 <= beta < 1 and eps > 0".into(),
                    ));
                }
                lr
            }
        };
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(())
    }
}

/// Applies one optimizer to a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    states: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            states: Vec::new(),
        })
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Consistency(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                for (p, g) in params.into_iter().zip(grads) {
                    sgd_step(p, g, lr)?;
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                if self.states.is_empty() {
                    self.states = params.iter().map(|p| AdamState::zeros_like(p)).collect();
                }
                for ((p, g), s) in params.into_iter().zip(grads).zip(&mut self.states) {
                    adam_step(p, g, s, lr, beta1, beta2, eps)?;
                }
            }
        }
        Ok(())
    }
}
