use crate::linalg::{derive_seed, sample_gaussian, thin_qr};
use crate::matrix::Matrix;

/// `A diag(sigma) B^T` with Haar-like random orthonormal `A` (`rows x len`)
/// and `B` (`cols x len`), so `sigma` is exactly the nonzero spectrum.
///
/// Panics if `sigma` is longer than `min(rows, cols)`.
pub fn matrix_with_spectrum(rows: usize, cols: usize, sigma: &[f64], seed: u64) -> Matrix {
    let len = sigma.len();
    assert!(
        len <= rows.min(cols),
        "spectrum longer than min(rows, cols)"
    );
    if len == 0 {
        return Matrix::zeros(rows, cols);
    }
    let left = thin_qr(&sample_gaussian(rows, len, derive_seed(seed, 0)))
        .expect("Gaussian sketch has full column rank");
    let right = thin_qr(&sample_gaussian(cols, len, derive_seed(seed, 1)))
        .expect("Gaussian sketch has full column rank");
    let mut scaled = left;
    for i in 0..rows {
        for (v, s) in scaled.row_mut(i).iter_mut().zip(sigma) {
            *v *= s;
        }
    }
    scaled.matmul_t(&right)
}

/// Spectrum with the given head followed by `n - head.len()` equal values
/// whose squares sum to `q`.
pub fn uniform_tail_spectrum(n: usize, head: &[f64], q: f64) -> Vec<f64> {
    let tail_len = n - head.len();
    let tail_value = if tail_len == 0 {
        0.0
    } else {
        (q / tail_len as f64).sqrt()
    };
    head.iter()
        .copied()
        .chain(std::iter::repeat_n(tail_value, tail_len))
        .collect()
}

/// Square `n x n` matrix whose tail past `head.len()` is uniform with energy `q`.
pub fn uniform_tail_matrix(n: usize, head: &[f64], q: f64, seed: u64) -> Matrix {
    matrix_with_spectrum(n, n, &uniform_tail_spectrum(n, head, q), seed)
}
