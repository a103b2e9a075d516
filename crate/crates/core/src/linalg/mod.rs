//! Dense linear-algebra kernels: thin SVD, thin QR, Gaussian sampling, and
//! projection onto the orthogonal complement of a basis.

mod qr;
mod random;
mod svd;

pub use qr::{householder_qr, thin_qr, QrFactors};
pub use random::{derive_seed, derive_seed_str, rng_from_seed, sample_gaussian};
pub use svd::{thin_svd, thin_svd_with, SvdMethod, SvdResult, JACOBI_MAX_DIM};

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;

/// Orthonormality tolerance for computed bases.
pub const ORTHONORMAL_TOL: f64 = 1e-10;
/// Tolerance used when checking caller-supplied bases.
pub const ORTHONORMAL_PRECONDITION_TOL: f64 = 1e-8;
/// A QR pivot below this fraction of `||A||_F` counts as rank deficient.
pub const RANK_DEFICIENCY_RTOL: f64 = 1e-12;

const POWER_ITERATION_RTOL: f64 = 1e-8;
const POWER_ITERATION_MAX: usize = 1000;

/// `(I - Q1 Q1^T) S`.
///
/// `q1` may have zero columns, in which case `s` is returned unchanged.
pub fn complement_project(q1: &Matrix, s: &Matrix) -> Result<Matrix> {
    if q1.rows() != s.rows() {
        return Err(shape_err(
            "complement_project",
            format!("S with {} rows", q1.rows()),
            format!("{}x{}", s.rows(), s.cols()),
        ));
    }
    if q1.cols() == 0 {
        return Ok(s.clone());
    }
    let defect = q1.orthonormality_defect();
    if defect > ORTHONORMAL_PRECONDITION_TOL {
        return Err(Error::Precondition(format!(
            "Q1 is not orthonormal (max |Q1^T Q1 - I| = {defect:.3e})"
        )));
    }
    let coeffs = q1.t_matmul(s);
    let mut out = s.clone();
    out.axpy(-1.0, &q1.matmul(&coeffs));
    Ok(out)
}

/// Largest singular value by power iteration on `A^T A`.
///
/// Stops when successive estimates agree to a relative `1e-8`, or after
/// 1000 iterations.
pub fn spectral_norm(a: &Matrix) -> f64 {
    if a.is_empty() || a.max_abs() == 0.0 {
        return 0.0;
    }
    let mut v = sample_gaussian(a.cols(), 1, 0x5eed);
    let mut estimate = 0.0;
    for _ in 0..POWER_ITERATION_MAX {
        let norm = v.frobenius_norm();
        if norm == 0.0 {
            break;
        }
        v.scale_in_place(1.0 / norm);
        let av = a.matmul(&v);
        let next = av.frobenius_norm();
        v = a.t_matmul(&av);
        if (next - estimate).abs() <= POWER_ITERATION_RTOL * next {
            return next;
        }
        estimate = next;
    }
    estimate
}
