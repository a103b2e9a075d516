use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::projector::ProjectionBasis;

/// Low-dimensional coordinates of an activation in a projection basis.
///
/// `x1 = X Q1` and `x2 = k X Q2`; the original activation is not kept.
#[derive(Debug, Clone)]
pub struct CompressedActivation {
    x1: Matrix,
    x2: Matrix,
    basis: Arc<ProjectionBasis>,
}

impl CompressedActivation {
    pub fn x1(&self) -> &Matrix {
        &self.x1
    }

    pub fn x2(&self) -> &Matrix {
        &self.x2
    }

    pub fn basis(&self) -> &Arc<ProjectionBasis> {
        &self.basis
    }

    /// Number of rows of the original activation.
    pub fn rows(&self) -> usize {
        self.x1.rows()
    }

    /// Scalars held for this activation, excluding the shared basis.
    pub fn stored_scalars(&self) -> usize {
        self.x1.len() + self.x2.len()
    }

    /// Reconstructs against the basis this activation was compressed with.
    pub fn decompress(&self) -> Matrix {
        lift(&self.x1, &self.x2, &self.basis)
    }
}

pub fn compress(x: &Matrix, basis: &Arc<ProjectionBasis>) -> Result<CompressedActivation> {
    if x.cols() != basis.dim() {
        return Err(shape_err(
            "compress",
            format!("{} columns", basis.dim()),
            format!("{} columns", x.cols()),
        ));
    }
    x.ensure_finite("activation")?;
    let x1 = x.matmul(basis.q1());
    let mut x2 = x.matmul(basis.q2());
    x2.scale_in_place(basis.scale());
    Ok(CompressedActivation {
        x1,
        x2,
        basis: Arc::clone(basis),
    })
}

/// `X1 Q1^T + X2 Q2^T`; fails if `ca` was built against another basis.
pub fn reconstruct(ca: &CompressedActivation, basis: &ProjectionBasis) -> Result<Matrix> {
    if ca.basis.id() != basis.id() {
        return Err(Error::Consistency(format!(
            "activation was compressed with basis {} but reconstruction used basis {}",
            ca.basis.id(),
            basis.id()
        )));
    }
    Ok(lift(&ca.x1, &ca.x2, basis))
}

fn lift(x1: &Matrix, x2: &Matrix, basis: &ProjectionBasis) -> Matrix {
    let mut out = Matrix::zeros(x1.rows(), basis.dim());
    if basis.r1() > 0 {
        out.add_assign(&x1.matmul_t(basis.q1()));
    }
    if basis.r2() > 0 {
        out.add_assign(&x2.matmul_t(basis.q2()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{sample_gaussian, thin_svd};
    use crate::projector::{build_basis, ProjectionMode};

    #[test]
    fn coordinate_row_lands_in_principal_part() {
        let mut x = Matrix::zeros(4, 5);
        x.set(0, 0, 10.0);
        x.set(1, 1, 1.0);
        x.set(2, 2, 0.5);
        let basis = Arc::new(build_basis(&x, ProjectionMode::Prac, 1, 2, 3, 1.0).unwrap());
        let mut e1 = Matrix::zeros(1, 5);
        e1.set(0, 0, 1.0);
        let ca = compress(&e1, &basis).unwrap();
        assert!((ca.x1().get(0, 0).abs() - 1.0).abs() < 1e-12);
        assert!(ca.x2().max_abs() < 1e-12);
    }

    #[test]
    fn full_rank_roundtrip_is_exact() {
        let x = sample_gaussian(10, 8, 5);
        for (mode, r1, r2) in [
            (ProjectionMode::Prac, 3, 5),
            (ProjectionMode::Rac, 0, 8),
            (ProjectionMode::Pac, 8, 0),
        ] {
            let basis = Arc::new(build_basis(&x, mode, r1, r2, 1, 1.0).unwrap());
            let ca = compress(&x, &basis).unwrap();
            let back = reconstruct(&ca, &basis).unwrap();
            assert!(back.max_abs_diff(&x) < 1e-10, "{mode}");
        }
    }

    #[test]
    fn storage_counts() {
        let x = sample_gaussian(8, 16, 2);
        let basis = Arc::new(build_basis(&x, ProjectionMode::Prac, 2, 4, 1, 1.0).unwrap());
        let ca = compress(&x, &basis).unwrap();
        assert_eq!(ca.stored_scalars(), 48);
        assert_eq!(x.len(), 128);
        assert_eq!(basis.storage_scalars(), 16 * 6);
    }

    #[test]
    fn pac_error_is_tail_energy() {
        let x = sample_gaussian(12, 9, 4);
        let basis = Arc::new(build_basis(&x, ProjectionMode::Pac, 3, 0, 0, 1.0).unwrap());
        let back = reconstruct(&compress(&x, &basis).unwrap(), &basis).unwrap();
        let sigma = thin_svd(&x, 9).unwrap().sigma;
        let tail: f64 = sigma[3..].iter().map(|s| s * s).sum();
        assert!((back.sub(&x).frobenius_norm_sq() - tail).abs() < 1e-9 * tail.max(1.0));
    }

    #[test]
    fn zero_maps_to_zero() {
        let x = Matrix::zeros(5, 6);
        let basis = Arc::new(build_basis(&x, ProjectionMode::Prac, 2, 2, 0, 1.0).unwrap());
        let back = reconstruct(&compress(&x, &basis).unwrap(), &basis).unwrap();
        assert_eq!(back, Matrix::zeros(5, 6));
    }

    #[test]
    fn mismatched_basis_and_shape_are_rejected() {
        let x = sample_gaussian(6, 6, 1);
        let a = Arc::new(build_basis(&x, ProjectionMode::Prac, 2, 2, 1, 1.0).unwrap());
        let b = Arc::new(build_basis(&x, ProjectionMode::Prac, 2, 2, 1, 1.0).unwrap());
        let ca = compress(&x, &a).unwrap();
        assert!(matches!(reconstruct(&ca, &b), Err(Error::Consistency(_))));
        assert!(matches!(
            compress(&sample_gaussian(6, 5, 1), &a),
            Err(Error::Shape { .. })
        ));
    }
}
