//! Two small SGD experiments: a biased estimator that never converges, and
//! the convergence bound for unbiased gradients with bounded variance.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::rng_from_seed;

/// Step sizes `scale / (t + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonicSchedule {
    pub scale: f64,
}

impl HarmonicSchedule {
    pub fn rate(&self, t: u64) -> f64 {
        self.scale / (t + 1) as f64
    }
}

impl Default for HarmonicSchedule {
    fn default() -> Self {
        Self { scale: 0.1 }
    }
}

/// How the two-coordinate gradient estimate is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CounterexampleVariant {
    /// Only the first coordinate ever receives a gradient.
    Biased,
    /// Stochastic gradient on the coordinate with the larger magnitude.
    MaxSelection,
    /// Full stochastic gradient.
    Unbiased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterexamplePoint {
    pub step: u64,
    pub w1: f64,
    pub w2: f64,
    /// Norm of the full (expected) gradient at the iterate.
    pub grad_norm: f64,
    /// Coordinate updated at this step (0 or 1); `None` for the full update.
    pub updated: Option<u8>,
}

/// Runs SGD on `f(w) = E(w1 - 3 xi)^2 + w2^2` with `xi` uniform on `{-1, +1}`.
///
/// The minimiser is the origin and `grad f(w) = 2 w`. Point `t` holds the
/// iterate before update `t`; the trajectory has `steps + 1` points.
pub fn counterexample_run(
    steps: u64,
    schedule: HarmonicSchedule,
    variant: CounterexampleVariant,
    start: (f64, f64),
    seed: u64,
) -> Result<Vec<CounterexamplePoint>> {
    if !(schedule.scale.is_finite() && schedule.scale > 0.0) {
        return Err(Error::Parameter(
            "learning-rate scale must be positive".into(),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let (mut w1, mut w2) = start;
    let mut out = Vec::with_capacity(steps as usize + 1);
    for t in 0..=steps {
        let point = |updated| CounterexamplePoint {
            step: t,
            w1,
            w2,
            grad_norm: 2.0 * w1.hypot(w2),
            updated,
        };
        if t == steps {
            out.push(point(None));
            break;
        }
        let mut current = point(None);
        let xi = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let g1 = 2.0 * (w1 - 3.0 * xi);
        let g2 = 2.0 * w2;
        let eta = schedule.rate(t);
        let updated = match variant {
            CounterexampleVariant::Biased => {
                w1 -= eta * g1;
                Some(0)
            }
            CounterexampleVariant::MaxSelection => {
                if g1.abs() >= g2.abs() {
                    w1 -= eta * g1;
                    Some(0)
                } else {
                    w2 -= eta * g2;
                    Some(1)
                }
            }
            CounterexampleVariant::Unbiased => {
                w1 -= eta * g1;
                w2 -= eta * g2;
                None
            }
        };
        current.updated = updated;
        out.push(current);
    }
    Ok(out)
}

/// First step whose full-gradient norm is at most `threshold`.
pub fn first_hit(trajectory: &[CounterexamplePoint], threshold: f64) -> Option<u64> {
    trajectory
        .iter()
        .find(|p| p.grad_norm <= threshold)
        .map(|p| p.step)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundedVarianceParams {
    /// Smoothness constant.
    pub smoothness: f64,
    /// Initial suboptimality `f(w_1) - f*`.
    pub initial_gap: f64,
    /// Gradient noise standard deviation.
    pub noise: f64,
    pub steps: u64,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundedVarianceOutcome {
    pub params: BoundedVarianceParams,
    pub step_size: f64,
    /// `min_t ||grad f(w_t)||^2` over the `steps` iterates.
    pub min_grad_norm_sq: f64,
    /// `2 L D / T + 2 sqrt(2 L D / T) sigma`.
    pub bound: f64,
    /// `||grad f(w_t)||^2` per iterate.
    pub grad_norm_sq: Vec<f64>,
}

impl BoundedVarianceOutcome {
    pub fn within_bound(&self) -> bool {
        self.min_grad_norm_sq <= self.bound
    }
}

/// `2 L D / T + 2 sqrt(2 L D / T) sigma`.
pub fn bounded_variance_bound(smoothness: f64, initial_gap: f64, noise: f64, steps: u64) -> f64 {
    let a = 2.0 * smoothness * initial_gap / steps as f64;
    a + 2.0 * a.sqrt() * noise
}

/// Constant-step SGD on `f(w) = 1/2 sum_i lambda_i w_i^2` with curvatures
/// `lambda_i = L (i + 1) / d`, gradients perturbed by `N(0, sigma^2 / d I)`.
///
/// The step is `min(1/L, sqrt(2 D / L) / (sigma sqrt(T)))`.
pub fn bounded_variance_demo(
    params: BoundedVarianceParams,
    seed: u64,
) -> Result<BoundedVarianceOutcome> {
    let BoundedVarianceParams {
        smoothness,
        initial_gap,
        noise,
        steps,
        dim,
    } = params;
    if !(smoothness > 0.0 && initial_gap > 0.0 && noise >= 0.0 && steps > 0 && dim > 0) {
        return Err(Error::Parameter(
            "need L > 0, gap > 0, sigma >= 0, T > 0 and dim > 0".into(),
        ));
    }
    let curvature: Vec<f64> = (0..dim)
        .map(|i| smoothness * (i + 1) as f64 / dim as f64)
        .collect();
    let step_size = if noise == 0.0 {
        1.0 / smoothness
    } else {
        (1.0 / smoothness)
            .min((2.0 * initial_gap / smoothness).sqrt() / (noise * (steps as f64).sqrt()))
    };
    let c = (2.0 * initial_gap / curvature.iter().sum::<f64>()).sqrt();
    let mut w = vec![c; dim];
    let mut rng = rng_from_seed(seed);
    let per_coord = noise / (dim as f64).sqrt();
    let mut grad_norm_sq = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let grad: Vec<f64> = w.iter().zip(&curvature).map(|(x, l)| l * x).collect();
        grad_norm_sq.push(grad.iter().map(|g| g * g).sum());
        for (x, g) in w.iter_mut().zip(&grad) {
            let z: f64 = rng.sample(StandardNormal);
            *x -= step_size * (g + per_coord * z);
        }
    }
    Ok(BoundedVarianceOutcome {
        params,
        step_size,
        min_grad_norm_sq: grad_norm_sq.iter().copied().fold(f64::INFINITY, f64::min),
        bound: bounded_variance_bound(smoothness, initial_gap, noise, steps),
        grad_norm_sq,
    })
}
