use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::projector::{CompressedActivation, SharedSubspaceCache};
use crate::train::{CompressionPolicy, LayerKind};

/// An activation kept for the backward pass, raw or compressed.
#[derive(Debug, Clone)]
pub enum StoredTensor {
    Raw(Matrix),
    Compressed(Arc<CompressedActivation>),
}

impl StoredTensor {
    /// The activation as seen by backward: exact when raw, `X~` otherwise.
    pub fn recover(&self) -> Matrix {
        match self {
            Self::Raw(x) => x.clone(),
            Self::Compressed(ca) => ca.decompress(),
        }
    }

    pub fn scalars(&self) -> u64 {
        match self {
            Self::Raw(x) => x.len() as u64,
            Self::Compressed(ca) => ca.stored_scalars() as u64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoredActivation {
    pub key: String,
    pub step: u64,
    pub tensor: StoredTensor,
    fingerprint: u64,
}

/// Per-row mean and variance kept uncompressed by normalisation layers.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub step: u64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Everything the backward pass of one step may read.
#[derive(Debug, Default)]
pub struct ActivationStore {
    step: u64,
    tensors: BTreeMap<String, StoredActivation>,
    stats: BTreeMap<String, NormStats>,
}

impl ActivationStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops everything from the previous step.
    pub fn begin_step(&mut self, step: u64) {
        self.step = step;
        self.tensors.clear();
        self.stats.clear();
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn get(&self, key: &str, step: u64) -> Result<&StoredActivation> {
        let entry = self
            .tensors
            .get(key)
            .ok_or_else(|| Error::Consistency(format!("no stored activation for `{key}`")))?;
        if entry.step != step {
            return Err(Error::Consistency(format!(
                "stored activation `{key}` is from step {}, backward is at step {step}",
                entry.step
            )));
        }
        Ok(entry)
    }

    pub fn stats(&self, key: &str, step: u64) -> Result<&NormStats> {
        let entry = self
            .stats
            .get(key)
            .ok_or_else(|| Error::Consistency(format!("no stored statistics for `{key}`")))?;
        if entry.step != step {
            return Err(Error::Consistency(format!(
                "statistics `{key}` are from step {}, backward is at step {step}",
                entry.step
            )));
        }
        Ok(entry)
    }

    /// Places a tensor directly, bypassing the forward pass.
    pub fn insert(&mut self, key: &str, tensor: StoredTensor) {
        let fingerprint = match &tensor {
            StoredTensor::Raw(x) => x.fingerprint(),
            StoredTensor::Compressed(ca) => ca.basis().id(),
        };
        self.tensors.insert(
            key.to_string(),
            StoredActivation {
                key: key.to_string(),
                step: self.step,
                tensor,
                fingerprint,
            },
        );
    }

    pub(crate) fn put_stats(&mut self, key: &str, mean: Vec<f64>, var: Vec<f64>) {
        self.stats.insert(
            key.to_string(),
            NormStats {
                step: self.step,
                mean,
                var,
            },
        );
    }

    /// Scalars held per row name (tensors and statistics), in name order.
    pub fn breakdown(&self) -> BTreeMap<String, u64> {
        let mut rows: BTreeMap<String, u64> = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.tensor.scalars()))
            .collect();
        for (k, s) in &self.stats {
            rows.insert(k.clone(), (s.mean.len() + s.var.len()) as u64);
        }
        rows
    }

    pub fn total_scalars(&self) -> u64 {
        self.breakdown().values().sum()
    }
}

/// State threaded through a forward pass.
pub struct ForwardContext<'a> {
    pub policy: &'a CompressionPolicy,
    pub cache: &'a mut SharedSubspaceCache,
    pub store: &'a mut ActivationStore,
}

impl ForwardContext<'_> {
    pub fn step(&self) -> u64 {
        self.store.step
    }

    /// Stores `x` under `key`; repeated calls within a step share one entry.
    pub fn save(&mut self, key: &str, x: &Matrix, kind: LayerKind) -> Result<()> {
        let step = self.store.step;
        let fingerprint = x.fingerprint();
        if let Some(existing) = self.store.tensors.get(key) {
            if existing.step == step {
                if existing.fingerprint != fingerprint {
                    return Err(Error::Consistency(format!(
                        "key `{key}` received a different activation within step {step}"
                    )));
                }
                if let StoredTensor::Raw(_) = existing.tensor {
                    return Ok(());
                }
            }
        }
        let tensor = match self.policy.subspace_policy(x.cols(), kind)? {
            None => StoredTensor::Raw(x.clone()),
            Some(sp) => StoredTensor::Compressed(self.cache.shared_compress(key, x, &sp, step)?),
        };
        self.store.tensors.insert(
            key.to_string(),
            StoredActivation {
                key: key.to_string(),
                step,
                tensor,
                fingerprint,
            },
        );
        Ok(())
    }
}
