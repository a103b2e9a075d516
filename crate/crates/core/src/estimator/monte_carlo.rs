use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::estimator::stats::{parallel_trials, Merge, ScalarMoments, VectorMoments};
use crate::estimator::theory::{residual_energy, variance_from_energies};
use crate::linalg::{derive_seed, spectral_norm, thin_svd, ORTHONORMAL_PRECONDITION_TOL};
use crate::matrix::Matrix;
use crate::projector::{random_complement, ProjectionMode};

/// Fewest trials accepted by the Monte Carlo routines.
pub const MIN_TRIALS: usize = 100;

/// Absolute slack added to every standard-error comparison so that
/// zero-variance quantities are judged against roundoff, not exact zero.
pub const ROUNDOFF_FLOOR: f64 = 1e-10;

/// Summary of a Monte Carlo run against its closed-form comparator.
#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    pub mode: ProjectionMode,
    pub dim: usize,
    pub r1: usize,
    pub r2: usize,
    pub trials: usize,
    /// Frobenius norm of the mean deviation from the target.
    pub bias_fro: f64,
    /// Mean squared Frobenius error.
    pub mse: f64,
    pub mse_stderr: f64,
    pub theory_mse: f64,
    pub seed: u64,
}

impl MomentReport {
    /// `|mse - theory_mse| <= z * mse_stderr` (plus roundoff slack).
    pub fn mse_matches_theory(&self, z: f64) -> bool {
        (self.mse - self.theory_mse).abs()
            <= z * self.mse_stderr + ROUNDOFF_FLOOR * self.theory_mse.abs().max(1.0)
    }

    /// `mse <= theory_mse + z * mse_stderr` (plus roundoff slack).
    pub fn mse_within_bound(&self, z: f64) -> bool {
        self.mse
            <= self.theory_mse
                + z * self.mse_stderr
                + ROUNDOFF_FLOOR * self.theory_mse.abs().max(1.0)
    }

    /// Distance of `mse` from `theory_mse` in standard errors.
    pub fn mse_z(&self) -> f64 {
        z_score(self.mse - self.theory_mse, self.mse_stderr)
    }
}

/// A [`MomentReport`] plus the entrywise mean deviation and its standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloStudy {
    pub report: MomentReport,
    /// `mean(estimate) - target`, entrywise.
    pub mean_deviation: Matrix,
    pub deviation_stderr: Matrix,
}

impl MonteCarloStudy {
    /// Every entry satisfies `|mean deviation| <= z * stderr` (plus roundoff slack).
    pub fn entries_within(&self, z: f64) -> bool {
        self.mean_deviation
            .as_slice()
            .iter()
            .zip(self.deviation_stderr.as_slice())
            .all(|(d, se)| d.abs() <= z * se + ROUNDOFF_FLOOR)
    }

    /// Largest entrywise `|mean deviation| / stderr`, ignoring deviations
    /// below the roundoff floor.
    pub fn max_entry_z(&self) -> f64 {
        self.mean_deviation
            .as_slice()
            .iter()
            .zip(self.deviation_stderr.as_slice())
            .map(|(&d, &se)| {
                if d.abs() <= ROUNDOFF_FLOOR {
                    0.0
                } else {
                    z_score(d, se)
                }
            })
            .fold(0.0, f64::max)
    }
}

fn z_score(delta: f64, se: f64) -> f64 {
    if delta == 0.0 {
        0.0
    } else if se == 0.0 {
        f64::INFINITY
    } else {
        delta.abs() / se
    }
}

#[derive(Clone)]
struct TrialAccumulator {
    entries: VectorMoments,
    sq_error: ScalarMoments,
}

impl TrialAccumulator {
    fn new(len: usize) -> Self {
        Self {
            entries: VectorMoments::new(len),
            sq_error: ScalarMoments::default(),
        }
    }

    fn push(&mut self, deviation: &Matrix) {
        self.entries.push(deviation.as_slice());
        self.sq_error.push(deviation.frobenius_norm_sq());
    }
}

impl Merge for TrialAccumulator {
    fn merge_from(&mut self, other: Self) {
        self.entries.merge(&other.entries);
        self.sq_error.merge(&other.sq_error);
    }
}

/// Fixed principal subspace plus per-trial random draws for one `X`.
struct ReconstructionSampler<'a> {
    x: &'a Matrix,
    q1: Matrix,
    r2: usize,
    k: f64,
    /// `X Q1 Q1^T - X`, the deterministic part of every deviation.
    principal_deviation: Matrix,
    seed: u64,
}

impl<'a> ReconstructionSampler<'a> {
    fn new(x: &'a Matrix, mode: ProjectionMode, r1: usize, r2: usize, seed: u64) -> Result<Self> {
        let n = x.cols();
        mode.validate_ranks(n, r1, r2)?;
        x.ensure_finite("activation")?;
        let q1 = if r1 == 0 {
            Matrix::zeros(n, 0)
        } else {
            if x.rows() < r1 {
                return Err(Error::Parameter(format!(
                    "principal rank {r1} needs at least {r1} rows, got {}",
                    x.rows()
                )));
            }
            thin_svd(x, r1)?.v
        };
        let principal_deviation = x.matmul(&q1).matmul_t(&q1).sub(x);
        Ok(Self {
            x,
            q1,
            r2,
            k: mode.scaling(n, r1, r2, 1.0),
            principal_deviation,
            seed,
        })
    }

    /// `X~ - X` for trial `i`.
    fn deviation(&self, i: u64) -> Result<Matrix> {
        if self.r2 == 0 {
            return Ok(self.principal_deviation.clone());
        }
        let q2 = random_complement(&self.q1, self.r2, derive_seed(self.seed, i))?;
        let mut coords = self.x.matmul(&q2);
        coords.scale_in_place(self.k);
        let mut dev = coords.matmul_t(&q2);
        dev.add_assign(&self.principal_deviation);
        Ok(dev)
    }

    fn residual_energy(&self) -> f64 {
        residual_energy(self.x, &self.q1)
    }
}

fn check_trials(trials: usize) -> Result<()> {
    if trials < MIN_TRIALS {
        return Err(Error::Parameter(format!(
            "at least {MIN_TRIALS} trials are required, got {trials}"
        )));
    }
    Ok(())
}

/// Runs `trials` reconstructions with `Q1` fixed (one SVD of `x`) and `Q2`
/// redrawn per trial from `derive_seed(seed, i)`.
///
/// PAC has no randomness; its single deterministic outcome is reported with
/// zero standard error.
pub fn mc_reconstruction_study(
    x: &Matrix,
    mode: ProjectionMode,
    r1: usize,
    r2: usize,
    trials: usize,
    seed: u64,
) -> Result<MonteCarloStudy> {
    check_trials(trials)?;
    let sampler = ReconstructionSampler::new(x, mode, r1, r2, seed)?;
    let n = x.cols();
    let theory_mse = variance_from_energies(
        mode,
        n,
        r1,
        r2,
        sampler.residual_energy(),
        x.frobenius_norm_sq(),
    );
    let acc = if r2 == 0 {
        let mut acc = TrialAccumulator::new(x.len());
        acc.push(&sampler.deviation(0)?);
        acc
    } else {
        parallel_trials(
            trials,
            || TrialAccumulator::new(x.len()),
            |i, acc| {
                acc.push(&sampler.deviation(i)?);
                Ok(())
            },
        )?
    };
    Ok(finish(
        acc,
        x.rows(),
        x.cols(),
        mode,
        n,
        r1,
        r2,
        trials,
        seed,
        theory_mse,
    ))
}

/// Scalar summary of [`mc_reconstruction_study`].
pub fn mc_reconstruction_moments(
    x: &Matrix,
    mode: ProjectionMode,
    r1: usize,
    r2: usize,
    trials: usize,
    seed: u64,
) -> Result<MomentReport> {
    mc_reconstruction_study(x, mode, r1, r2, trials, seed).map(|s| s.report)
}

/// Monte Carlo moments of the compressed weight gradient `X~^T Gy` against
/// the exact `X^T Gy`.
///
/// `theory_mse` is the bound `sigma^2 * ||Gy||_2^2`, where `sigma^2` is the
/// exact reconstruction variance and `||.||_2` the spectral norm.
pub fn gradient_estimator_study(
    x: &Matrix,
    grad_output: &Matrix,
    mode: ProjectionMode,
    r1: usize,
    r2: usize,
    trials: usize,
    seed: u64,
) -> Result<MonteCarloStudy> {
    if grad_output.rows() != x.rows() {
        return Err(shape_err(
            "gradient_estimator_moments",
            format!("output gradient with {} rows", x.rows()),
            format!("{}x{}", grad_output.rows(), grad_output.cols()),
        ));
    }
    grad_output.ensure_finite("output gradient")?;
    check_trials(trials)?;
    let sampler = ReconstructionSampler::new(x, mode, r1, r2, seed)?;
    let n = x.cols();
    let sigma_sq = variance_from_energies(
        mode,
        n,
        r1,
        r2,
        sampler.residual_energy(),
        x.frobenius_norm_sq(),
    );
    let theory_mse = sigma_sq * spectral_norm(grad_output).powi(2);
    let len = n * grad_output.cols();
    let acc = if r2 == 0 {
        let mut acc = TrialAccumulator::new(len);
        acc.push(&sampler.deviation(0)?.t_matmul(grad_output));
        acc
    } else {
        parallel_trials(
            trials,
            || TrialAccumulator::new(len),
            |i, acc| {
                acc.push(&sampler.deviation(i)?.t_matmul(grad_output));
                Ok(())
            },
        )?
    };
    Ok(finish(
        acc,
        n,
        grad_output.cols(),
        mode,
        n,
        r1,
        r2,
        trials,
        seed,
        theory_mse,
    ))
}

pub fn gradient_estimator_moments(
    x: &Matrix,
    grad_output: &Matrix,
    mode: ProjectionMode,
    r1: usize,
    r2: usize,
    trials: usize,
    seed: u64,
) -> Result<MomentReport> {
    gradient_estimator_study(x, grad_output, mode, r1, r2, trials, seed).map(|s| s.report)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    acc: TrialAccumulator,
    rows: usize,
    cols: usize,
    mode: ProjectionMode,
    n: usize,
    r1: usize,
    r2: usize,
    trials: usize,
    seed: u64,
    theory_mse: f64,
) -> MonteCarloStudy {
    let mean_deviation =
        Matrix::from_vec(rows, cols, acc.entries.mean().to_vec()).expect("accumulator length");
    let deviation_stderr =
        Matrix::from_vec(rows, cols, acc.entries.stderr()).expect("accumulator length");
    MonteCarloStudy {
        report: MomentReport {
            mode,
            dim: n,
            r1,
            r2,
            trials,
            bias_fro: mean_deviation.frobenius_norm(),
            mse: acc.sq_error.mean(),
            mse_stderr: acc.sq_error.stderr(),
            theory_mse,
            seed,
        },
        mean_deviation,
        deviation_stderr,
    }
}

/// Monte Carlo estimate of `E[Q2 Q2^T]` with entrywise standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct SecondMomentEstimate {
    pub trials: usize,
    pub seed: u64,
    pub mean: Matrix,
    pub stderr: Matrix,
}

impl SecondMomentEstimate {
    /// Every entry within `z` standard errors of `expected` (plus roundoff slack).
    pub fn matches(&self, expected: &Matrix, z: f64) -> bool {
        self.mean
            .as_slice()
            .iter()
            .zip(expected.as_slice())
            .zip(self.stderr.as_slice())
            .all(|((m, e), se)| (m - e).abs() <= z * se + ROUNDOFF_FLOOR)
    }

    pub fn trace(&self) -> f64 {
        self.mean.trace()
    }
}

/// Averages `Q2 Q2^T` over `trials` fresh draws in the complement of `q1`.
pub fn mc_projector_second_moment(
    q1: &Matrix,
    r2: usize,
    trials: usize,
    seed: u64,
) -> Result<SecondMomentEstimate> {
    check_trials(trials)?;
    let (n, r1) = q1.shape();
    if r2 == 0 || r1 + r2 > n {
        return Err(Error::Parameter(format!(
            "need 1 <= r2 <= n - r1, got r2 = {r2}, n = {n}, r1 = {r1}"
        )));
    }
    let defect = q1.orthonormality_defect();
    if defect > ORTHONORMAL_PRECONDITION_TOL {
        return Err(Error::Precondition(format!(
            "Q1 is not orthonormal (max |Q1^T Q1 - I| = {defect:.3e})"
        )));
    }
    let acc = parallel_trials(
        trials,
        || TrialAccumulator::new(n * n),
        |i, acc| {
            let q2 = random_complement(q1, r2, derive_seed(seed, i))?;
            acc.entries.push(q2.matmul_t(&q2).as_slice());
            Ok(())
        },
    )?;
    Ok(SecondMomentEstimate {
        trials,
        seed,
        mean: Matrix::from_vec(n, n, acc.entries.mean().to_vec()).expect("accumulator length"),
        stderr: Matrix::from_vec(n, n, acc.entries.stderr()).expect("accumulator length"),
    })
}

/// Closed form `(r2 / (n - r1)) (I - Q1 Q1^T)`.
pub fn expected_projector_moment(q1: &Matrix, r2: usize) -> Matrix {
    let (n, r1) = q1.shape();
    let mut out = Matrix::identity(n);
    if r1 > 0 {
        out = out.sub(&q1.matmul_t(q1));
    }
    out.scale(r2 as f64 / (n - r1) as f64)
}

impl Merge for VectorMoments {
    fn merge_from(&mut self, other: Self) {
        self.merge(&other);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{sample_gaussian, thin_qr};

    fn diag_fixture() -> Matrix {
        Matrix::diag(&[10.0, 1.0, 1.0, 1.0])
    }

    #[test]
    fn prac_variance_identity_on_diag_fixture() {
        let r = mc_reconstruction_moments(&diag_fixture(), ProjectionMode::Prac, 1, 1, 20_000, 11)
            .unwrap();
        assert!((r.theory_mse - 6.0).abs() < 1e-12);
        assert!(r.mse_matches_theory(3.0), "{r:?}");
    }

    #[test]
    fn pac_is_deterministic_tail() {
        let x = sample_gaussian(7, 5, 2);
        let s = mc_reconstruction_study(&x, ProjectionMode::Pac, 2, 0, 100, 0).unwrap();
        let sigma = thin_svd(&x, 5).unwrap().sigma;
        let tail: f64 = sigma[2..].iter().map(|v| v * v).sum();
        assert!((s.report.mse - tail).abs() < 1e-10);
        assert!((s.report.bias_fro - tail.sqrt()).abs() < 1e-10);
        assert_eq!(s.report.mse_stderr, 0.0);
    }

    #[test]
    fn full_rank_prac_is_exact() {
        let x = sample_gaussian(6, 5, 3);
        let r = mc_reconstruction_moments(&x, ProjectionMode::Prac, 2, 3, 200, 1).unwrap();
        assert!(r.mse < 1e-20 && r.bias_fro < 1e-10);
        assert_eq!(r.theory_mse, 0.0);
        assert!(r.mse_matches_theory(3.0));
    }

    #[test]
    fn rac_unbiased_small() {
        let x = sample_gaussian(3, 6, 4);
        let s = mc_reconstruction_study(&x, ProjectionMode::Rac, 0, 2, 20_000, 5).unwrap();
        assert!(s.entries_within(5.0), "max z {}", s.max_entry_z());
        assert!(s.report.mse_matches_theory(3.0), "{:?}", s.report);
    }

    #[test]
    fn results_are_reproducible() {
        let x = sample_gaussian(4, 4, 4);
        let a = mc_reconstruction_study(&x, ProjectionMode::Prac, 1, 2, 1500, 9).unwrap();
        let b = mc_reconstruction_study(&x, ProjectionMode::Prac, 1, 2, 1500, 9).unwrap();
        assert_eq!(a.mean_deviation, b.mean_deviation);
        assert_eq!(a.report.mse, b.report.mse);
    }

    #[test]
    fn too_few_trials() {
        assert!(
            mc_reconstruction_moments(&diag_fixture(), ProjectionMode::Prac, 1, 1, 99, 0).is_err()
        );
    }

    #[test]
    fn zero_output_gradient() {
        let r = gradient_estimator_moments(
            &diag_fixture(),
            &Matrix::zeros(4, 2),
            ProjectionMode::Prac,
            1,
            1,
            200,
            0,
        )
        .unwrap();
        assert_eq!((r.bias_fro, r.mse, r.theory_mse), (0.0, 0.0, 0.0));
    }

    #[test]
    fn gradient_unbiased_and_bounded() {
        let gy = sample_gaussian(4, 2, 8);
        let s =
            gradient_estimator_study(&diag_fixture(), &gy, ProjectionMode::Prac, 1, 1, 20_000, 3)
                .unwrap();
        assert!(s.entries_within(5.0), "max z {}", s.max_entry_z());
        assert!(s.report.mse_within_bound(0.0), "{:?}", s.report);
    }

    #[test]
    fn pac_gradient_bias_is_constant() {
        let x = sample_gaussian(5, 4, 1);
        let gy = sample_gaussian(5, 3, 2);
        let r = gradient_estimator_moments(&x, &gy, ProjectionMode::Pac, 2, 0, 100, 0).unwrap();
        let q1 = thin_svd(&x, 2).unwrap().v;
        let resid = x.sub(&x.matmul(&q1).matmul_t(&q1));
        let expected = resid.t_matmul(&gy).frobenius_norm();
        assert!((r.bias_fro - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_shape_mismatch() {
        assert!(matches!(
            gradient_estimator_moments(
                &diag_fixture(),
                &Matrix::zeros(3, 2),
                ProjectionMode::Prac,
                1,
                1,
                100,
                0
            ),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn second_moment_small() {
        let mut q1 = Matrix::zeros(4, 1);
        q1.set(0, 0, 1.0);
        let est = mc_projector_second_moment(&q1, 1, 20_000, 1).unwrap();
        assert!(est.matches(&expected_projector_moment(&q1, 1), 5.0));
        assert!((est.trace() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn full_random_basis_is_identity() {
        let est = mc_projector_second_moment(&Matrix::zeros(5, 0), 5, 100, 1).unwrap();
        assert!(est.mean.max_abs_diff(&Matrix::identity(5)) < 1e-12);
        assert!(est.matches(&Matrix::identity(5), 5.0));
    }

    #[test]
    fn second_moment_rejects_bad_q1() {
        let q1 = sample_gaussian(4, 1, 0);
        assert!(matches!(
            mc_projector_second_moment(&q1, 1, 100, 0),
            Err(Error::Precondition(_))
        ));
        let q1 = thin_qr(&q1).unwrap();
        assert!(mc_projector_second_moment(&q1, 4, 100, 0).is_err());
    }
}
