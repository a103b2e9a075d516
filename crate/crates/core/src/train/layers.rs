use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::train::store::{ActivationStore, ForwardContext};
use crate::train::LayerKind;

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_8;
const GELU_CUBIC: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t)
        + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// `Y = X W` with `W` of shape `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub key: String,
    pub weight: Matrix,
}

/// Several linear maps reading the same input, outputs concatenated
/// column-wise. All heads share one stored activation.
#[derive(Debug, Clone)]
pub struct LinearGroup {
    pub key: String,
    pub weights: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct Gelu {
    pub key: String,
}

/// Row-wise normalisation with learned gain and bias (both `1 x n`).
///
/// Stores the pre-normalisation input (compressible) and the per-row mean
/// and variance (never compressed).
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub key: String,
    pub stats_key: String,
    pub gain: Matrix,
    pub bias: Matrix,
}

/// `Y = X + inner(X)`.
#[derive(Debug, Clone)]
pub struct Residual {
    pub inner: Vec<Layer>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(Linear),
    LinearGroup(LinearGroup),
    Gelu(Gelu),
    LayerNorm(LayerNorm),
    Residual(Residual),
}

fn check_finite(x: &Matrix, what: &str) -> Result<()> {
    x.ensure_finite(what)
        .map_err(|e| Error::TrainingFault(e.to_string()))
}

fn check_cols(op: &'static str, x: &Matrix, cols: usize) -> Result<()> {
    if x.cols() != cols {
        return Err(shape_err(
            op,
            format!("{cols} columns"),
            format!("{}x{}", x.rows(), x.cols()),
        ));
    }
    Ok(())
}

impl Layer {
    pub fn linear(key: &str, weight: Matrix) -> Self {
        Self::Linear(Linear {
            key: key.to_string(),
            weight,
        })
    }

    pub fn gelu(key: &str) -> Self {
        Self::Gelu(Gelu {
            key: key.to_string(),
        })
    }

    pub fn layer_norm(key: &str, stats_key: &str, width: usize) -> Self {
        Self::LayerNorm(LayerNorm {
            key: key.to_string(),
            stats_key: stats_key.to_string(),
            gain: Matrix::from_fn(1, width, |_, _| 1.0),
            bias: Matrix::zeros(1, width),
        })
    }

    /// Computes the output from the exact input and saves what backward needs.
    pub fn forward_store(&self, x: &Matrix, ctx: &mut ForwardContext<'_>) -> Result<Matrix> {
        check_finite(x, "layer input")?;
        let y = match self {
            Self::Linear(l) => {
                check_cols("Linear::forward", x, l.weight.rows())?;
                ctx.save(&l.key, x, LayerKind::Linear)?;
                x.matmul(&l.weight)
            }
            Self::LinearGroup(g) => {
                let mut parts = Vec::with_capacity(g.weights.len());
                for w in &g.weights {
                    check_cols("LinearGroup::forward", x, w.rows())?;
                    // Each head asks for the activation; the store hands back one entry.
                    ctx.save(&g.key, x, LayerKind::Linear)?;
                    parts.push(x.matmul(w));
                }
                concat_columns(&parts, x.rows())
            }
            Self::Gelu(g) => {
                ctx.save(&g.key, x, LayerKind::Nonlinear)?;
                x.map(gelu)
            }
            Self::LayerNorm(ln) => {
                check_cols("LayerNorm::forward", x, ln.gain.cols())?;
                ctx.save(&ln.key, x, LayerKind::Nonlinear)?;
                let (mean, var) = row_moments(x);
                let y = normalise(x, &mean, &var, &ln.gain, &ln.bias);
                ctx.store.put_stats(&ln.stats_key, mean, var);
                y
            }
            Self::Residual(r) => {
                let mut h = x.clone();
                for layer in &r.inner {
                    h = layer.forward_store(&h, ctx)?;
                }
                check_cols("Residual::forward", &h, x.cols())?;
                h.add(x)
            }
        };
        check_finite(&y, "layer output")?;
        Ok(y)
    }

    /// Plain forward pass with nothing stored.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(match self {
            Self::Linear(l) => {
                check_cols("Linear::forward", x, l.weight.rows())?;
                x.matmul(&l.weight)
            }
            Self::LinearGroup(g) => {
                let parts: Vec<Matrix> = g.weights.iter().map(|w| x.matmul(w)).collect();
                concat_columns(&parts, x.rows())
            }
            Self::Gelu(_) => x.map(gelu),
            Self::LayerNorm(ln) => {
                let (mean, var) = row_moments(x);
                normalise(x, &mean, &var, &ln.gain, &ln.bias)
            }
            Self::Residual(r) => {
                let mut h = x.clone();
                for layer in &r.inner {
                    h = layer.forward(&h)?;
                }
                h.add(x)
            }
        })
    }

    /// Returns the input gradient and appends parameter gradients to `grads`
    /// in [`Layer::params`] order.
    pub fn backward_recover(
        &self,
        grad_out: &Matrix,
        store: &ActivationStore,
        step: u64,
        grads: &mut Vec<Matrix>,
    ) -> Result<Matrix> {
        match self {
            Self::Linear(l) => {
                let x = store.get(&l.key, step)?.tensor.recover();
                grads.push(x.t_matmul(grad_out));
                Ok(grad_out.matmul_t(&l.weight))
            }
            Self::LinearGroup(g) => {
                let x = store.get(&g.key, step)?.tensor.recover();
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                let mut offset = 0;
                for w in &g.weights {
                    let part = grad_out.columns_range(offset, offset + w.cols());
                    offset += w.cols();
                    grads.push(x.t_matmul(&part));
                    dx.add_assign(&part.matmul_t(w));
                }
                Ok(dx)
            }
            Self::Gelu(g) => {
                let x = store.get(&g.key, step)?.tensor.recover();
                Ok(x.map(gelu_derivative).hadamard(grad_out))
            }
            Self::LayerNorm(ln) => {
                let x = store.get(&ln.key, step)?.tensor.recover();
                let stats = store.stats(&ln.stats_key, step)?;
                let (dx, dgain, dbias) =
                    layer_norm_backward(&x, &stats.mean, &stats.var, &ln.gain, grad_out);
                grads.push(dgain);
                grads.push(dbias);
                Ok(dx)
            }
            Self::Residual(r) => {
                let mut nested: Vec<Vec<Matrix>> = Vec::with_capacity(r.inner.len());
                let mut g = grad_out.clone();
                for layer in r.inner.iter().rev() {
                    let mut own = Vec::new();
                    g = layer.backward_recover(&g, store, step, &mut own)?;
                    nested.push(own);
                }
                for own in nested.into_iter().rev() {
                    grads.extend(own);
                }
                Ok(g.add(grad_out))
            }
        }
    }

    pub fn params(&self) -> Vec<&Matrix> {
        match self {
            Self::Linear(l) => vec![&l.weight],
            Self::LinearGroup(g) => g.weights.iter().collect(),
            Self::Gelu(_) => Vec::new(),
            Self::LayerNorm(ln) => vec![&ln.gain, &ln.bias],
            Self::Residual(r) => r.inner.iter().flat_map(Layer::params).collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Self::Linear(l) => vec![&mut l.weight],
            Self::LinearGroup(g) => g.weights.iter_mut().collect(),
            Self::Gelu(_) => Vec::new(),
            Self::LayerNorm(ln) => vec![&mut ln.gain, &mut ln.bias],
            Self::Residual(r) => r.inner.iter_mut().flat_map(Layer::params_mut).collect(),
        }
    }
}

fn concat_columns(parts: &[Matrix], rows: usize) -> Matrix {
    let cols: usize = parts.iter().map(Matrix::cols).sum();
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let mut offset = 0;
        let row = out.row_mut(i);
        for p in parts {
            row[offset..offset + p.cols()].copy_from_slice(p.row(i));
            offset += p.cols();
        }
    }
    out
}

fn row_moments(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.cols() as f64;
    (0..x.rows())
        .map(|i| {
            let r = x.row(i);
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var)
        })
        .unzip()
}

fn normalise(x: &Matrix, mean: &[f64], var: &[f64], gain: &Matrix, bias: &Matrix) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        let xhat = (x.get(i, j) - mean[i]) / (var[i] + LAYER_NORM_EPS).sqrt();
        xhat * gain.get(0, j) + bias.get(0, j)
    })
}

/// Backward of row normalisation evaluated at `x` with saved `mean`/`var`.
fn layer_norm_backward(
    x: &Matrix,
    mean: &[f64],
    var: &[f64],
    gain: &Matrix,
    grad_out: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let (rows, cols) = x.shape();
    let n = cols as f64;
    let mut dx = Matrix::zeros(rows, cols);
    let mut dgain = Matrix::zeros(1, cols);
    let mut dbias = Matrix::zeros(1, cols);
    for i in 0..rows {
        let inv_std = 1.0 / (var[i] + LAYER_NORM_EPS).sqrt();
        let xhat: Vec<f64> = x.row(i).iter().map(|v| (v - mean[i]) * inv_std).collect();
        let gy = grad_out.row(i);
        let dxhat: Vec<f64> = gy
            .iter()
            .enumerate()
            .map(|(j, g)| g * gain.get(0, j))
            .collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() / n;
        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        for j in 0..cols {
            dgain.as_mut_slice()[j] += gy[j] * xhat[j];
            dbias.as_mut_slice()[j] += gy[j];
            dx.set(
                i,
                j,
                inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat),
            );
        }
    }
    (dx, dgain, dbias)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_8).abs() < 1e-9);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn concat_layout() {
        let a = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap();
        let c = concat_columns(&[a, b], 2);
        assert_eq!(
            c,
            Matrix::from_rows(&[[1.0, 3.0, 4.0], [2.0, 5.0, 6.0]]).unwrap()
        );
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0, 6.0]]).unwrap();
        let ln = Layer::layer_norm("ln", "ln.stats", 4);
        let y = ln.forward(&x).unwrap();
        let mean: f64 = y.row(0).iter().sum::<f64>() / 4.0;
        let var: f64 = y.row(0).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 3.5 / (3.5 + LAYER_NORM_EPS)).abs() < 1e-12);
    }
}
