//! Truncated singular value decomposition.
//!
//! Two deterministic back ends:
//!
//! * one-sided (Hestenes) Jacobi, which orthogonalises the columns of `X`
//!   and thereby diagonalises `X^T X` without forming it;
//! * Golub-Kahan Householder bidiagonalisation followed by implicit-shift
//!   QR sweeps on the bidiagonal.
//!
//! [`thin_svd`] uses Jacobi when the smaller dimension is at most
//! [`JACOBI_MAX_DIM`] and Golub-Kahan otherwise. Both return singular
//! vectors normalised so that the largest-magnitude entry of every right
//! singular vector is non-negative (ties go to the lowest index).

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Largest `min(m, n)` handled by the Jacobi back end under [`SvdMethod::Auto`].
pub const JACOBI_MAX_DIM: usize = 128;

const MAX_JACOBI_SWEEPS: usize = 80;
const MAX_QR_ITERATIONS: usize = 75;

/// Top-`r` singular triplets.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `m x r`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// `n x r`, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    /// `U diag(sigma) V^T`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.sigma.iter().enumerate() {
                us.set(i, j, us.get(i, j) * s);
            }
        }
        us.matmul_t(&self.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvdMethod {
    Auto,
    Jacobi,
    GolubKahan,
}

/// Top-`r` SVD of `x` with the automatic back-end choice.
pub fn thin_svd(x: &Matrix, r: usize) -> Result<SvdResult> {
    thin_svd_with(x, r, SvdMethod::Auto)
}

pub fn thin_svd_with(x: &Matrix, r: usize, method: SvdMethod) -> Result<SvdResult> {
    let (m, n) = x.shape();
    let p = m.min(n);
    if r == 0 || r > p {
        return Err(Error::Parameter(format!(
            "svd rank {r} outside 1..={p} for a {m}x{n} matrix"
        )));
    }
    x.ensure_finite("thin_svd input")?;

    // Work on the orientation with at least as many rows as columns.
    let transposed = m < n;
    let a = if transposed { x.transpose() } else { x.clone() };
    let method = match method {
        SvdMethod::Auto if p <= JACOBI_MAX_DIM => SvdMethod::Jacobi,
        SvdMethod::Auto => SvdMethod::GolubKahan,
        other => other,
    };
    let (left, sigma, right) = match method {
        SvdMethod::Jacobi => jacobi_full(&a)?,
        _ => golub_kahan_full(&a)?,
    };
    let (left, right) = if transposed {
        (right, left)
    } else {
        (left, right)
    };

    // Sort descending and keep the top r.
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    order.truncate(r);

    let mut u_cols: Vec<Vec<f64>> = order.iter().map(|&i| left[i].clone()).collect();
    let mut v_cols: Vec<Vec<f64>> = order.iter().map(|&i| right[i].clone()).collect();
    let sigma: Vec<f64> = order.iter().map(|&i| sigma[i]).collect();

    for (u, v) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        let mut pivot = 0;
        for (i, vi) in v.iter().enumerate() {
            if vi.abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|t| *t = -*t);
            u.iter_mut().for_each(|t| *t = -*t);
        }
    }

    Ok(SvdResult {
        u: Matrix::from_columns(m, &u_cols),
        sigma,
        v: Matrix::from_columns(n, &v_cols),
    })
}

type FullSvd = (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>);

/// One-sided Jacobi on an `m x n` matrix with `m >= n`. Returns `n` left
/// vectors (length `m`), `n` singular values and `n` right vectors, unsorted.
fn jacobi_full(a: &Matrix) -> Result<FullSvd> {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = f64::EPSILON * (m as f64);
    let mut converged = n < 2;
    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence(format!(
            "one-sided Jacobi did not converge in {MAX_JACOBI_SWEEPS} sweeps"
        )));
    }

    let sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let left = normalise_left(cols, &sigma, m);
    Ok((left, sigma, v))
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Turns `sigma_j u_j` columns into an orthonormal set.
///
/// Columns are visited in order of decreasing singular value. Each is
/// re-orthogonalised against the already accepted ones; columns whose
/// singular value is zero (or that lose most of their norm to the
/// projection) are replaced by a deterministic completion vector.
fn normalise_left(cols: Vec<Vec<f64>>, sigma: &[f64], m: usize) -> Vec<Vec<f64>> {
    let n = cols.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let smax = sigma.iter().copied().fold(0.0, f64::max);
    let negligible = smax * f64::EPSILON * (m.max(n) as f64);

    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); n];
    for &j in &order {
        let mut candidate = None;
        if sigma[j] > negligible {
            let mut u: Vec<f64> = cols[j].iter().map(|t| t / sigma[j]).collect();
            let kept = orthogonalise(&mut u, &accepted);
            if kept > 0.5 {
                candidate = Some(u);
            }
        }
        let u = candidate.unwrap_or_else(|| completion_vector(&accepted, m));
        out[j] = u.clone();
        accepted.push(u);
    }
    out
}

/// Two rounds of Gram-Schmidt against `basis`, then normalisation. Returns
/// the norm that survived the projection (relative to the input norm).
fn orthogonalise(u: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    let before = dot(u, u).sqrt();
    for _ in 0..2 {
        for b in basis {
            let p = dot(u, b);
            for (x, y) in u.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
    }
    let after = dot(u, u).sqrt();
    if after > 0.0 {
        u.iter_mut().for_each(|t| *t /= after);
    }
    if before > 0.0 {
        after / before
    } else {
        0.0
    }
}

/// Unit vector orthogonal to `basis`, chosen among projected coordinate axes.
fn completion_vector(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for i in 0..m {
        let mut e = vec![0.0; m];
        e[i] = 1.0;
        let kept = orthogonalise(&mut e, basis);
        if best.as_ref().is_none_or(|(k, _)| kept > *k + 1e-12) {
            best = Some((kept, e));
        }
    }
    best.map(|(_, e)| e).expect("completion requires m > rank")
}

/// Golub-Kahan-Reinsch SVD of an `m x n` matrix with `m >= n`.
fn golub_kahan_full(a: &Matrix) -> Result<FullSvd> {
    let (m, n) = a.shape();
    // Column-major: u[j][i] is entry (i, j). Holds A, then the reflectors,
    // then the left singular vectors.
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = vec![vec![0.0; n]; n];
    let mut d = vec![0.0; n];
    // e[i] couples d[i-1] and d[i]; e[0] is always zero.
    let mut e = vec![0.0; n];
    let mut scratch = vec![0.0; n];

    // Householder bidiagonalisation.
    let mut g = 0.0;
    let mut scale = 0.0;
    let mut anorm: f64 = 0.0;
    for i in 0..n {
        let l = i + 1;
        e[i] = scale * g;

        // Left reflector annihilating column i below the diagonal.
        g = 0.0;
        scale = (i..m).map(|k| u[i][k].abs()).sum::<f64>();
        if scale > 0.0 {
            let mut s = 0.0;
            for k in i..m {
                u[i][k] /= scale;
                s += u[i][k] * u[i][k];
            }
            let f = u[i][i];
            g = -s.sqrt().copysign(f);
            let h = f * g - s;
            u[i][i] = f - g;
            for j in l..n {
                let s: f64 = (i..m).map(|k| u[i][k] * u[j][k]).sum();
                let f = s / h;
                for k in i..m {
                    let t = u[i][k];
                    u[j][k] += f * t;
                }
            }
            for k in i..m {
                u[i][k] *= scale;
            }
        }
        d[i] = scale * g;

        // Right reflector annihilating row i beyond the superdiagonal.
        g = 0.0;
        scale = 0.0;
        if l < n {
            scale = (l..n).map(|k| u[k][i].abs()).sum::<f64>();
            if scale > 0.0 {
                let mut s = 0.0;
                for k in l..n {
                    u[k][i] /= scale;
                    s += u[k][i] * u[k][i];
                }
                let f = u[l][i];
                g = -s.sqrt().copysign(f);
                let h = f * g - s;
                u[l][i] = f - g;
                for k in l..n {
                    scratch[k] = u[k][i] / h;
                }
                for j in l..m {
                    let s: f64 = (l..n).map(|k| u[k][j] * u[k][i]).sum();
                    for k in l..n {
                        u[k][j] += s * scratch[k];
                    }
                }
                for k in l..n {
                    u[k][i] *= scale;
                }
            }
        }
        anorm = anorm.max(d[i].abs() + e[i].abs());
    }

    accumulate_right(&u, &mut v, &e, n);
    accumulate_left(&mut u, &d, m, n);

    // Implicit-shift QR on the bidiagonal.
    let eps = f64::EPSILON;
    for k in (0..n).rev() {
        let mut its = 0;
        loop {
            let mut l = k;
            let mut cancel = true;
            loop {
                if l == 0 || e[l].abs() <= eps * anorm {
                    cancel = false;
                    break;
                }
                if d[l - 1].abs() <= eps * anorm {
                    break;
                }
                l -= 1;
            }
            if cancel {
                // d[l-1] is negligible: chase e[l] out with rotations on the left.
                let nm = l - 1;
                let mut c = 0.0;
                let mut s = 1.0;
                for i in l..=k {
                    let f = s * e[i];
                    e[i] *= c;
                    if f.abs() <= eps * anorm {
                        break;
                    }
                    let g = d[i];
                    let h = f.hypot(g);
                    d[i] = h;
                    c = g / h;
                    s = -f / h;
                    rotate_cols(&mut u, nm, i, c, s);
                }
            }
            let z = d[k];
            if l == k {
                if z < 0.0 {
                    d[k] = -z;
                    for t in &mut v[k] {
                        *t = -*t;
                    }
                }
                break;
            }
            its += 1;
            if its > MAX_QR_ITERATIONS {
                return Err(Error::NoConvergence(format!(
                    "bidiagonal QR did not converge for singular value {k}"
                )));
            }

            // Shift from the trailing 2x2 block.
            let mut x = d[l];
            let nm = k - 1;
            let y = d[nm];
            let g = e[nm];
            let h = e[k];
            let mut f = ((y - z) * (y + z) + (g - h) * (g + h)) / (2.0 * h * y);
            let r = f.hypot(1.0);
            f = ((x - z) * (x + z) + h * ((y / (f + r.copysign(f))) - h)) / x;

            let mut c = 1.0;
            let mut s = 1.0;
            for j in l..=nm {
                let i = j + 1;
                let mut g = e[i];
                let mut y = d[i];
                let mut h = s * g;
                g *= c;
                let mut z = f.hypot(h);
                e[j] = z;
                c = f / z;
                s = h / z;
                f = x * c + g * s;
                g = g * c - x * s;
                h = y * s;
                y *= c;
                rotate_cols(&mut v, j, i, c, s);
                z = f.hypot(h);
                d[j] = z;
                if z != 0.0 {
                    c = f / z;
                    s = h / z;
                }
                f = c * g + s * y;
                x = c * y - s * g;
                rotate_cols(&mut u, j, i, c, s);
            }
            e[l] = 0.0;
            e[k] = f;
            d[k] = x;
        }
    }

    if d.iter().any(|s| !s.is_finite()) {
        return Err(Error::NoConvergence(
            "bidiagonal QR produced non-finite singular values".into(),
        ));
    }
    let left = normalise_left(
        u.iter()
            .zip(&d)
            .map(|(col, s)| col.iter().map(|t| t * s).collect())
            .collect(),
        &d,
        m,
    );
    Ok((left, d, v))
}

fn accumulate_right(u: &[Vec<f64>], v: &mut [Vec<f64>], e: &[f64], n: usize) {
    // v[j][i] is entry (i, j) of V, i.e. v is column-major.
    for i in (0..n).rev() {
        let l = i + 1;
        if l < n {
            let g = e[l];
            if g != 0.0 {
                // Reflector components are stored in row i: u[k][i], k >= l.
                for j in l..n {
                    v[i][j] = (u[j][i] / u[l][i]) / g;
                }
                for j in l..n {
                    let s: f64 = (l..n).map(|k| u[k][i] * v[j][k]).sum();
                    for k in l..n {
                        let t = v[i][k];
                        v[j][k] += s * t;
                    }
                }
            }
            for j in l..n {
                v[j][i] = 0.0;
                v[i][j] = 0.0;
            }
        }
        v[i][i] = 1.0;
    }
}

fn accumulate_left(u: &mut [Vec<f64>], d: &[f64], m: usize, n: usize) {
    for i in (0..n.min(m)).rev() {
        let l = i + 1;
        let g = d[i];
        for j in l..n {
            u[j][i] = 0.0;
        }
        if g != 0.0 {
            let ginv = 1.0 / g;
            for j in l..n {
                let s: f64 = (l..m).map(|k| u[i][k] * u[j][k]).sum();
                let f = (s / u[i][i]) * ginv;
                for k in i..m {
                    let t = u[i][k];
                    u[j][k] += f * t;
                }
            }
            for t in &mut u[i][i..m] {
                *t *= ginv;
            }
        } else {
            for t in &mut u[i][i..m] {
                *t = 0.0;
            }
        }
        u[i][i] += 1.0;
    }
}

/// Plane rotation of columns `a` and `b`: `(y, z) -> (y c + z s, z c - y s)`.
fn rotate_cols(cols: &mut [Vec<f64>], a: usize, b: usize, c: f64, s: f64) {
    let (lo, hi, swap) = if a < b {
        let (lo, hi) = cols.split_at_mut(b);
        (&mut lo[a], &mut hi[0], false)
    } else {
        let (lo, hi) = cols.split_at_mut(a);
        (&mut lo[b], &mut hi[0], true)
    };
    let (ca, cb) = if swap { (hi, lo) } else { (lo, hi) };
    for (y, z) in ca.iter_mut().zip(cb.iter_mut()) {
        let (yy, zz) = (*y, *z);
        *y = yy * c + zz * s;
        *z = zz * c - yy * s;
    }
}
