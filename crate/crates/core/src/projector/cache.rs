use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{derive_seed, derive_seed_str};
use crate::matrix::Matrix;
use crate::projector::{
    build_basis, compress, maybe_refresh, CompressedActivation, ProjectionBasis, ProjectionMode,
    RefreshSchedule,
};

/// How the activations behind one key are compressed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubspacePolicy {
    pub mode: ProjectionMode,
    pub r1: usize,
    pub r2: usize,
    pub schedule: RefreshSchedule,
    pub scale_multiplier: f64,
    pub seed: u64,
}

/// Number of decompositions performed for one key.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DecompositionCounters {
    pub svd: u64,
    pub qr: u64,
}

impl DecompositionCounters {
    fn add(&mut self, other: Self) {
        self.svd += other.svd;
        self.qr += other.qr;
    }
}

#[derive(Debug)]
struct StepEntry {
    step: u64,
    fingerprint: u64,
    compressed: Arc<CompressedActivation>,
}

#[derive(Debug)]
struct KeyState {
    policy: SubspacePolicy,
    basis: Arc<ProjectionBasis>,
    current: Option<StepEntry>,
    counters: DecompositionCounters,
}

/// One basis and one compressed tensor per activation key and step.
///
/// Every consumer of the same activation within a step (for example the
/// query, key and value projections of one input) receives the same
/// `Arc<CompressedActivation>`. Bases persist across steps and are
/// refreshed by the lazy schedule.
#[derive(Debug, Default)]
pub struct SharedSubspaceCache {
    keys: BTreeMap<String, KeyState>,
}

impl SharedSubspaceCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops per-step entries from steps other than `step`.
    pub fn begin_step(&mut self, step: u64) {
        for state in self.keys.values_mut() {
            if state.current.as_ref().is_some_and(|e| e.step != step) {
                state.current = None;
            }
        }
    }

    /// Compresses `x` under `key` at step `t`, building or refreshing the
    /// basis on the first call for that `(key, t)`.
    pub fn shared_compress(
        &mut self,
        key: &str,
        x: &Matrix,
        policy: &SubspacePolicy,
        t: u64,
    ) -> Result<Arc<CompressedActivation>> {
        let fingerprint = x.fingerprint();
        if let Some(state) = self.keys.get(key) {
            if state.policy != *policy {
                return Err(Error::Consistency(format!(
                    "key `{key}` was registered with a different policy"
                )));
            }
            if let Some(entry) = state.current.as_ref().filter(|e| e.step == t) {
                if entry.fingerprint != fingerprint {
                    return Err(Error::Consistency(format!(
                        "key `{key}` received a different activation within step {t}"
                    )));
                }
                return Ok(Arc::clone(&entry.compressed));
            }
        }

        let seed = derive_seed(derive_seed_str(policy.seed, key), t);
        let (basis, delta) = match self.keys.get(key) {
            None => {
                let b = build_basis(
                    x,
                    policy.mode,
                    policy.r1,
                    policy.r2,
                    seed,
                    policy.scale_multiplier,
                )?
                .stamp(t);
                (Arc::new(b), build_cost(policy))
            }
            Some(state) => {
                let prev = &state.basis;
                let next = maybe_refresh(prev, x, t, policy.schedule, seed)?;
                if next.id() == prev.id() {
                    (Arc::clone(prev), DecompositionCounters::default())
                } else {
                    let svd = u64::from(next.last_svd_step() != prev.last_svd_step());
                    let qr = u64::from(next.last_random_step() != prev.last_random_step());
                    (Arc::new(next), DecompositionCounters { svd, qr })
                }
            }
        };

        let compressed = Arc::new(compress(x, &basis)?);
        let state = self
            .keys
            .entry(key.to_string())
            .or_insert_with(|| KeyState {
                policy: *policy,
                basis: Arc::clone(&basis),
                current: None,
                counters: DecompositionCounters::default(),
            });
        state.basis = basis;
        state.counters.add(delta);
        state.current = Some(StepEntry {
            step: t,
            fingerprint,
            compressed: Arc::clone(&compressed),
        });
        Ok(compressed)
    }

    pub fn basis(&self, key: &str) -> Option<&Arc<ProjectionBasis>> {
        self.keys.get(key).map(|s| &s.basis)
    }

    pub fn counters(&self, key: &str) -> Option<DecompositionCounters> {
        self.keys.get(key).map(|s| s.counters)
    }

    pub fn total_counters(&self) -> DecompositionCounters {
        let mut total = DecompositionCounters::default();
        for s in self.keys.values() {
            total.add(s.counters);
        }
        total
    }

    /// Scalars held by all cached bases.
    pub fn basis_storage_scalars(&self) -> usize {
        self.keys.values().map(|s| s.basis.storage_scalars()).sum()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.keys.keys().map(String::as_str)
    }
}

fn build_cost(policy: &SubspacePolicy) -> DecompositionCounters {
    DecompositionCounters {
        svd: u64::from(policy.r1 > 0),
        qr: u64::from(policy.r2 > 0),
    }
}
