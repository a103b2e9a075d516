use crate::error::{Error, Result};
use crate::estimator::DegenerateProfile;
use crate::linalg::thin_svd;
use crate::matrix::Matrix;
use crate::projector::ProjectionMode;

/// What [`theoretical_variance`] evaluates the closed form on.
#[derive(Debug, Clone, Copy)]
pub enum VarianceInput<'a> {
    /// An activation; its top-`r1` principal subspace is recomputed.
    Matrix(&'a Matrix),
    Profile(&'a DegenerateProfile),
    /// `tail` is the energy outside the principal subspace, `total` is `||X||_F^2`.
    Energies {
        tail: f64,
        total: f64,
    },
}

/// Exact expected squared reconstruction error `E||X~ - X||_F^2`.
///
/// PRAC: `(k - 1) * tail` with `k = (n - r1) / r2`. RAC: `(n / r2 - 1) * ||X||_F^2`.
/// PAC: the (deterministic) tail energy.
pub fn theoretical_variance(
    mode: ProjectionMode,
    n: usize,
    r1: usize,
    r2: usize,
    input: VarianceInput<'_>,
) -> Result<f64> {
    mode.validate_ranks(n, r1, r2)?;
    let (tail, total) = match input {
        VarianceInput::Energies { tail, total } => {
            if !(tail >= 0.0 && total >= tail) {
                return Err(Error::Parameter(format!(
                    "energies must satisfy 0 <= tail <= total, got tail {tail}, total {total}"
                )));
            }
            (tail, total)
        }
        VarianceInput::Profile(p) => {
            check_width(n, p.sigma.len().max(r1), "profile")?;
            (p.tail_energy(r1), p.total_energy)
        }
        VarianceInput::Matrix(x) => {
            if x.cols() != n {
                return Err(Error::Parameter(format!(
                    "activation has {} columns, expected n = {n}",
                    x.cols()
                )));
            }
            (principal_residual_energy(x, r1)?, x.frobenius_norm_sq())
        }
    };
    Ok(variance_from_energies(mode, n, r1, r2, tail, total))
}

fn check_width(n: usize, needed: usize, what: &str) -> Result<()> {
    if needed > n {
        return Err(Error::Parameter(format!("{what} is wider than n = {n}")));
    }
    Ok(())
}

pub(crate) fn variance_from_energies(
    mode: ProjectionMode,
    n: usize,
    r1: usize,
    r2: usize,
    tail: f64,
    total: f64,
) -> f64 {
    match mode {
        ProjectionMode::Pac => tail,
        ProjectionMode::Rac => (n as f64 / r2 as f64 - 1.0) * total,
        ProjectionMode::Prac => ((n - r1) as f64 / r2 as f64 - 1.0) * tail,
    }
}

/// `||X - X Q1 Q1^T||_F^2` for the top-`r1` right singular vectors `Q1`.
pub(crate) fn principal_residual_energy(x: &Matrix, r1: usize) -> Result<f64> {
    if r1 == 0 {
        return Ok(x.frobenius_norm_sq());
    }
    if r1 > x.rows().min(x.cols()) {
        return Err(Error::Parameter(format!(
            "principal rank {r1} exceeds min(rows, cols) of a {}x{} activation",
            x.rows(),
            x.cols()
        )));
    }
    let q1 = thin_svd(x, r1)?.v;
    Ok(residual_energy(x, &q1))
}

pub(crate) fn residual_energy(x: &Matrix, q1: &Matrix) -> f64 {
    if q1.cols() == 0 {
        return x.frobenius_norm_sq();
    }
    x.sub(&x.matmul(q1).matmul_t(q1)).frobenius_norm_sq()
}

/// Worst-case variance floor `((n - s) / (r - s) - 1) q` shared by every
/// unbiased rank-`r` linear projection scheme on `(s, q)`-degenerate inputs.
pub fn minimax_lower_bound(n: usize, s: usize, r: usize, q: f64) -> Result<f64> {
    if s >= r || r >= n {
        return Err(Error::Parameter(format!(
            "minimax bound needs s < r < n, got s = {s}, r = {r}, n = {n}"
        )));
    }
    if !(q >= 0.0 && q.is_finite()) {
        return Err(Error::Parameter(format!(
            "tail energy must be >= 0, got {q}"
        )));
    }
    Ok(((n - s) as f64 / (r - s) as f64 - 1.0) * q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{spectral_profile, uniform_tail_matrix};

    #[test]
    fn closed_forms() {
        let e = |tail, total| VarianceInput::Energies { tail, total };
        assert_eq!(
            theoretical_variance(ProjectionMode::Prac, 4, 1, 1, e(3.0, 103.0)).unwrap(),
            6.0
        );
        assert_eq!(
            theoretical_variance(ProjectionMode::Rac, 10, 0, 5, e(7.0, 7.0)).unwrap(),
            7.0
        );
        assert_eq!(
            theoretical_variance(ProjectionMode::Prac, 8, 3, 5, e(2.0, 9.0)).unwrap(),
            0.0
        );
        assert_eq!(
            theoretical_variance(ProjectionMode::Pac, 8, 3, 0, e(2.0, 9.0)).unwrap(),
            2.0
        );
    }

    #[test]
    fn matrix_and_profile_inputs_agree() {
        let x = Matrix::diag(&[10.0, 1.0, 1.0, 1.0]);
        let from_x =
            theoretical_variance(ProjectionMode::Prac, 4, 1, 1, VarianceInput::Matrix(&x)).unwrap();
        let p = spectral_profile(&x, 1).unwrap();
        let from_p =
            theoretical_variance(ProjectionMode::Prac, 4, 1, 1, VarianceInput::Profile(&p))
                .unwrap();
        assert!((from_x - 6.0).abs() < 1e-12);
        assert!((from_p - 6.0).abs() < 1e-12);
    }

    #[test]
    fn minimax_values() {
        assert_eq!(minimax_lower_bound(64, 4, 16, 1.0).unwrap(), 4.0);
        assert_eq!(minimax_lower_bound(64, 4, 16, 0.0).unwrap(), 0.0);
        assert!(minimax_lower_bound(64, 16, 16, 1.0).is_err());
        assert!(minimax_lower_bound(16, 4, 16, 1.0).is_err());
    }

    #[test]
    fn prac_attains_minimax_on_uniform_tail() {
        let x = uniform_tail_matrix(64, &[9.0, 7.0, 5.0, 3.0], 1.0, 5);
        let v = theoretical_variance(ProjectionMode::Prac, 64, 4, 12, VarianceInput::Matrix(&x))
            .unwrap();
        let lb = minimax_lower_bound(64, 4, 16, 1.0).unwrap();
        assert!((v - lb).abs() < 1e-10, "{v} vs {lb}");
    }
}
