use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::thin_svd;
use crate::matrix::Matrix;

/// Singular spectrum of an activation and its `(s, q)` degeneracy summary.
#[derive(Debug, Clone, Serialize)]
pub struct DegenerateProfile {
    /// Full non-increasing spectrum (length `min(rows, cols)`).
    pub sigma: Vec<f64>,
    /// Head count.
    #[serde(rename = "s")]
    pub head: usize,
    /// Tail energy `sum_{i > head} sigma_i^2`.
    #[serde(rename = "q")]
    pub tail: f64,
    pub total_energy: f64,
    /// `cumulative_energy[i] = sum_{j <= i} sigma_j^2 / total`.
    pub cumulative_energy: Vec<f64>,
}

impl DegenerateProfile {
    /// Energy outside the leading `r` singular directions.
    pub fn tail_energy(&self, r: usize) -> f64 {
        self.sigma.iter().skip(r).map(|s| s * s).sum()
    }

    /// Smallest head count whose cumulative energy reaches `fraction`.
    pub fn rank_for_energy(&self, fraction: f64) -> usize {
        self.cumulative_energy
            .iter()
            .position(|&c| c >= fraction)
            .map_or(self.sigma.len(), |i| i + 1)
    }
}

/// Exact spectrum of `x` via a full-rank thin SVD, with tail energy past `head`.
pub fn spectral_profile(x: &Matrix, head: usize) -> Result<DegenerateProfile> {
    let full = x.rows().min(x.cols());
    if head > full {
        return Err(Error::Parameter(format!(
            "head count {head} exceeds min(rows, cols) = {full}"
        )));
    }
    let sigma = if full == 0 {
        Vec::new()
    } else {
        thin_svd(x, full)?.sigma
    };
    let total_energy: f64 = sigma.iter().map(|v| v * v).sum();
    let mut running = 0.0;
    let cumulative_energy = sigma
        .iter()
        .map(|v| {
            running += v * v;
            if total_energy > 0.0 {
                (running / total_energy).min(1.0)
            } else {
                1.0
            }
        })
        .collect();
    let tail = sigma.iter().skip(head).map(|v| v * v).sum();
    Ok(DegenerateProfile {
        sigma,
        head,
        tail,
        total_energy,
        cumulative_energy,
    })
}
