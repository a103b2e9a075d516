use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{complement_project, sample_gaussian, thin_qr, thin_svd};
use crate::matrix::Matrix;
use crate::projector::ProjectionMode;

/// Tolerance for the orthonormality and mutual orthogonality of a basis.
pub const BASIS_ORTHOGONALITY_TOL: f64 = 1e-8;

static NEXT_BASIS_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_BASIS_ID.fetch_add(1, Ordering::Relaxed)
}

/// Principal and random subspaces used to compress one activation.
///
/// Immutable once built. Each construction gets a fresh process-wide `id`,
/// which compressed tensors carry to detect reconstruction against the
/// wrong basis.
#[derive(Debug, Clone, Serialize)]
pub struct ProjectionBasis {
    id: u64,
    mode: ProjectionMode,
    dim: usize,
    r1: usize,
    r2: usize,
    q1: Matrix,
    q2: Matrix,
    scale: f64,
    scale_multiplier: f64,
    last_svd_step: Option<u64>,
    last_random_step: Option<u64>,
}

/// Intervals of the lazy refresh schedule, in optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct RefreshSchedule {
    pub principal_interval: u64,
    pub random_interval: u64,
}

impl RefreshSchedule {
    pub fn new(principal_interval: u64, random_interval: u64) -> Result<Self> {
        if principal_interval == 0 || random_interval == 0 {
            return Err(Error::Parameter(
                "refresh intervals must be at least 1".into(),
            ));
        }
        Ok(Self {
            principal_interval,
            random_interval,
        })
    }

    /// Refresh every step.
    pub fn every_step() -> Self {
        Self {
            principal_interval: 1,
            random_interval: 1,
        }
    }
}

/// Builds a fresh basis from the activation `x` (`m x n`).
///
/// `Q1` holds the top `r1` right singular vectors of `x`; `Q2` is an
/// orthonormalised Gaussian sketch of the complement of `Q1`.
pub fn build_basis(
    x: &Matrix,
    mode: ProjectionMode,
    r1: usize,
    r2: usize,
    seed: u64,
    scale_multiplier: f64,
) -> Result<ProjectionBasis> {
    let n = x.cols();
    mode.validate_ranks(n, r1, r2)?;
    check_multiplier(scale_multiplier)?;
    x.ensure_finite("activation")?;
    let q1 = principal_subspace(x, r1)?;
    ProjectionBasis::from_principal(q1, mode, r2, seed, scale_multiplier)
}

/// Applies the lazy refresh rule at step `t`.
///
/// The principal subspace is recomputed when `t` is a multiple of the
/// principal interval, the random subspace when `t` is a multiple of the
/// random interval. A principal refresh always resamples `Q2` as well. When
/// nothing is due the input basis is returned unchanged, id included.
pub fn maybe_refresh(
    basis: &ProjectionBasis,
    x: &Matrix,
    t: u64,
    schedule: RefreshSchedule,
    seed: u64,
) -> Result<ProjectionBasis> {
    if schedule.principal_interval == 0 || schedule.random_interval == 0 {
        return Err(Error::Parameter(
            "refresh intervals must be at least 1".into(),
        ));
    }
    if x.cols() != basis.dim {
        return Err(shape_err(
            "maybe_refresh",
            format!("{} columns", basis.dim),
            format!("{} columns", x.cols()),
        ));
    }
    let principal_due = basis.r1 > 0 && t.is_multiple_of(schedule.principal_interval);
    let random_due = basis.r2 > 0 && t.is_multiple_of(schedule.random_interval);

    if principal_due {
        x.ensure_finite("activation")?;
        let q1 = principal_subspace(x, basis.r1)?;
        let mut next = ProjectionBasis::from_principal(
            q1,
            basis.mode,
            basis.r2,
            seed,
            basis.scale_multiplier,
        )?;
        next.last_svd_step = Some(t);
        next.last_random_step = if basis.r2 > 0 { Some(t) } else { None };
        return Ok(next);
    }
    if random_due {
        let mut next = basis.resample_random(seed)?;
        next.last_random_step = Some(t);
        return Ok(next);
    }
    Ok(basis.clone())
}

fn principal_subspace(x: &Matrix, r1: usize) -> Result<Matrix> {
    if r1 == 0 {
        return Ok(Matrix::zeros(x.cols(), 0));
    }
    if x.rows() < r1 {
        return Err(Error::Parameter(format!(
            "principal rank {r1} needs at least {r1} activation rows, got {}",
            x.rows()
        )));
    }
    Ok(thin_svd(x, r1)?.v)
}

fn check_multiplier(scale_multiplier: f64) -> Result<()> {
    if !(scale_multiplier.is_finite() && scale_multiplier > 0.0) {
        return Err(Error::Parameter(format!(
            "scale multiplier must be positive and finite, got {scale_multiplier}"
        )));
    }
    Ok(())
}

pub(crate) fn random_complement(q1: &Matrix, r2: usize, seed: u64) -> Result<Matrix> {
    let n = q1.rows();
    if r2 == 0 {
        return Ok(Matrix::zeros(n, 0));
    }
    let sketch = sample_gaussian(n, r2, seed);
    let projected = complement_project(q1, &sketch)?;
    thin_qr(&projected)
}

impl ProjectionBasis {
    /// Builds a basis around a caller-supplied principal subspace `q1`
    /// (`n x r1`, orthonormal), drawing `Q2` from `seed`.
    ///
    /// This is how Monte Carlo experiments hold `Q1` fixed across trials.
    pub fn from_principal(
        q1: Matrix,
        mode: ProjectionMode,
        r2: usize,
        seed: u64,
        scale_multiplier: f64,
    ) -> Result<Self> {
        let (n, r1) = q1.shape();
        mode.validate_ranks(n, r1, r2)?;
        check_multiplier(scale_multiplier)?;
        let q2 = random_complement(&q1, r2, seed)?;
        let basis = Self {
            id: next_id(),
            mode,
            dim: n,
            r1,
            r2,
            scale: mode.scaling(n, r1, r2, scale_multiplier),
            q1,
            q2,
            scale_multiplier,
            last_svd_step: None,
            last_random_step: None,
        };
        basis.validate()?;
        Ok(basis)
    }

    /// Same principal subspace, new random draw and new id.
    pub fn resample_random(&self, seed: u64) -> Result<Self> {
        let q2 = random_complement(&self.q1, self.r2, seed)?;
        let basis = Self {
            id: next_id(),
            q2,
            q1: self.q1.clone(),
            ..*self
        };
        basis.validate()?;
        Ok(basis)
    }

    /// Checks the orthogonality invariants to [`BASIS_ORTHOGONALITY_TOL`].
    pub fn validate(&self) -> Result<()> {
        let defect = self.orthogonality_defect();
        if defect > BASIS_ORTHOGONALITY_TOL {
            return Err(Error::Consistency(format!(
                "basis orthogonality defect {defect:.3e} exceeds {BASIS_ORTHOGONALITY_TOL:e}"
            )));
        }
        Ok(())
    }

    /// Largest deviation among `Q1^T Q1 - I`, `Q2^T Q2 - I` and `Q1^T Q2`.
    pub fn orthogonality_defect(&self) -> f64 {
        let cross = if self.r1 > 0 && self.r2 > 0 {
            self.q1.t_matmul(&self.q2).max_abs()
        } else {
            0.0
        };
        self.q1
            .orthonormality_defect()
            .max(self.q2.orthonormality_defect())
            .max(cross)
    }

    pub(crate) fn stamp(mut self, step: u64) -> Self {
        if self.r1 > 0 {
            self.last_svd_step = Some(step);
        }
        if self.r2 > 0 {
            self.last_random_step = Some(step);
        }
        self
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn mode(&self) -> ProjectionMode {
        self.mode
    }

    /// Activation width.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn r1(&self) -> usize {
        self.r1
    }

    pub fn r2(&self) -> usize {
        self.r2
    }

    pub fn q1(&self) -> &Matrix {
        &self.q1
    }

    pub fn q2(&self) -> &Matrix {
        &self.q2
    }

    /// Scaling applied to the random component (includes the multiplier).
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn scale_multiplier(&self) -> f64 {
        self.scale_multiplier
    }

    pub fn last_svd_step(&self) -> Option<u64> {
        self.last_svd_step
    }

    pub fn last_random_step(&self) -> Option<u64> {
        self.last_random_step
    }

    /// Scalars held by `Q1` and `Q2`.
    pub fn storage_scalars(&self) -> usize {
        self.dim * (self.r1 + self.r2)
    }
}
