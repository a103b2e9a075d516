//! Householder thin QR with a positive-diagonal convention on `R`.

use crate::error::{shape_err, Error, Result};
use crate::linalg::RANK_DEFICIENCY_RTOL;
use crate::matrix::Matrix;

/// Thin QR factors of an `m x k` matrix (`m >= k`).
#[derive(Debug, Clone)]
pub struct QrFactors {
    /// `m x k`, orthonormal columns.
    pub q: Matrix,
    /// `k x k` upper triangular with a strictly positive diagonal.
    pub r: Matrix,
}

/// Orthonormal basis of the column span of `a`.
///
/// Fails with [`Error::DegenerateInput`] when any `|R_jj|` falls below
/// `1e-12 * ||A||_F`.
pub fn thin_qr(a: &Matrix) -> Result<Matrix> {
    householder_qr(a).map(|f| f.q)
}

pub fn householder_qr(a: &Matrix) -> Result<QrFactors> {
    let (m, k) = a.shape();
    if m < k {
        return Err(shape_err("thin_qr", "rows >= cols", format!("{m}x{k}")));
    }
    a.ensure_finite("thin_qr input")?;
    if k == 0 {
        return Ok(QrFactors {
            q: Matrix::zeros(m, 0),
            r: Matrix::zeros(0, 0),
        });
    }

    let cutoff = RANK_DEFICIENCY_RTOL * a.frobenius_norm();
    // Column-major working copy; reflector j lives in w[j][j..].
    let mut w: Vec<Vec<f64>> = (0..k).map(|j| a.column(j)).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut diag = vec![0.0; k];

    for j in 0..k {
        let x = &w[j][j..];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= cutoff || norm == 0.0 {
            return Err(Error::DegenerateInput(format!(
                "column {j} is numerically dependent (|R_jj| = {norm:.3e}, cutoff {cutoff:.3e})"
            )));
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = x.to_vec();
        v[0] -= alpha;
        let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        for t in &mut v {
            *t /= vnorm;
        }
        diag[j] = alpha;
        w[j][j] = alpha;
        for t in &mut w[j][j + 1..] {
            *t = 0.0;
        }
        for col in w.iter_mut().skip(j + 1) {
            apply_reflector(&v, &mut col[j..]);
        }
        reflectors.push(v);
    }

    // Q = H_0 ... H_{k-1} [I_k; 0], formed column by column.
    let mut q_cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        for (i, v) in reflectors.iter().enumerate().rev() {
            apply_reflector(v, &mut e[i..]);
        }
        q_cols.push(e);
    }

    let mut r = Matrix::zeros(k, k);
    for (j, col) in w.iter().enumerate() {
        for i in 0..=j {
            r.set(i, j, col[i]);
        }
    }

    // Flip signs so that R has a positive diagonal.
    for j in 0..k {
        if diag[j] < 0.0 {
            for t in &mut q_cols[j] {
                *t = -*t;
            }
            for c in j..k {
                r.set(j, c, -r.get(j, c));
            }
        }
    }

    Ok(QrFactors {
        q: Matrix::from_columns(m, &q_cols),
        r,
    })
}

/// `x <- (I - 2 v v^T) x` for unit `v`.
#[inline]
fn apply_reflector(v: &[f64], x: &mut [f64]) {
    let s: f64 = v.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    let s2 = 2.0 * s;
    for (xi, vi) in x.iter_mut().zip(v) {
        *xi -= s2 * vi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sample_gaussian;

    /// Classical Gram-Schmidt, used only as an independent oracle.
    fn gram_schmidt(a: &Matrix) -> Matrix {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for j in 0..a.cols() {
            let mut v = a.column(j);
            for q in &cols {
                let p: f64 = q.iter().zip(&a.column(j)).map(|(x, y)| x * y).sum();
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= p * qi;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
        Matrix::from_columns(a.rows(), &cols)
    }

    #[test]
    fn scaled_coordinate_columns() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]]).unwrap();
        let q = thin_qr(&a).unwrap();
        let expected = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        assert!(q.max_abs_diff(&expected) < 1e-15, "{q:?}");
    }

    #[test]
    fn matches_gram_schmidt_oracle() {
        let a = Matrix::from_rows(&[[1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let q = thin_qr(&a).unwrap();
        assert!(q.orthonormality_defect() < 1e-10);
        // Gram-Schmidt also yields a positive R diagonal, so the bases coincide.
        assert!(q.max_abs_diff(&gram_schmidt(&a)) < 1e-12);
    }

    #[test]
    fn orthonormal_input_is_a_fixed_point() {
        let q0 = thin_qr(&sample_gaussian(9, 4, 11)).unwrap();
        let q1 = thin_qr(&q0).unwrap();
        assert!(q1.max_abs_diff(&q0) < 1e-13);
    }

    #[test]
    fn r_has_positive_diagonal_and_reproduces_input() {
        let a = sample_gaussian(7, 5, 3);
        let f = householder_qr(&a).unwrap();
        for j in 0..5 {
            assert!(f.r.get(j, j) > 0.0);
            for i in j + 1..5 {
                assert_eq!(f.r.get(i, j), 0.0);
            }
        }
        assert!(f.q.matmul(&f.r).max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn rank_deficient_input_is_rejected() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]).unwrap();
        assert!(matches!(thin_qr(&a), Err(Error::DegenerateInput(_))));
        assert!(matches!(
            thin_qr(&Matrix::zeros(3, 1)),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn wide_input_is_a_shape_error() {
        assert!(matches!(
            thin_qr(&Matrix::zeros(2, 3)),
            Err(Error::Shape { .. })
        ));
    }
}
