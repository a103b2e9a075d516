use rayon::prelude::*;

use crate::error::Result;

/// Trials per parallel work unit. Chunks are merged in index order, so
/// results do not depend on the thread count.
const TRIAL_CHUNK: usize = 512;

/// Running mean and variance of a scalar (Welford, mergeable).
#[derive(Debug, Clone, Copy, Default)]
pub struct ScalarMoments {
    count: u64,
    mean: f64,
    m2: f64,
}

impl ScalarMoments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Self) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn stderr(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Entrywise running moments of a fixed-length vector.
#[derive(Debug, Clone)]
pub struct VectorMoments {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl VectorMoments {
    pub fn new(len: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.mean.len());
        self.count += 1;
        let inv = 1.0 / self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta * inv;
            *s += delta * (v - *m);
        }
    }

    pub fn merge(&mut self, other: &Self) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Standard error of each entry's mean.
    pub fn stderr(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![0.0; self.mean.len()];
        }
        let n = self.count as f64;
        self.m2.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect()
    }
}

pub(crate) trait Merge {
    fn merge_from(&mut self, other: Self);
}

/// Runs `body(i, acc)` for `i in 0..trials` across the rayon pool and
/// merges the per-chunk accumulators in chunk order.
pub(crate) fn parallel_trials<A, I, F>(trials: usize, init: I, body: F) -> Result<A>
where
    A: Merge + Send,
    I: Fn() -> A + Sync,
    F: Fn(u64, &mut A) -> Result<()> + Sync,
{
    let starts: Vec<usize> = (0..trials).step_by(TRIAL_CHUNK).collect();
    let parts: Vec<Result<A>> = starts
        .into_par_iter()
        .map(|start| {
            let mut acc = init();
            for i in start..(start + TRIAL_CHUNK).min(trials) {
                body(i as u64, &mut acc)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = init();
    for part in parts {
        total.merge_from(part?);
    }
    Ok(total)
}
