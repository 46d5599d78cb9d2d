//! Numerical linear algebra: nullspace bases, rank, row-space membership,
//! symmetry tests and orthogonal complements.
//!
//! Vectors are rows throughout, so the nullspace of a `p x d` matrix `M`
//! is the left one: `{v in R^(1xp) : v M = 0}`. The workhorse is a
//! one-sided Jacobi SVD with cyclic sweeps in a fixed order, which is
//! deterministic given input bits. Matrices here are small (at most a few
//! hundred rows), so Jacobi's robustness beats fancier factorizations.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::mat::{dot, l2_norm, Mat};

/// Default relative singular-value cutoff.
pub const DEFAULT_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;
const ROTATION_EPS: f64 = 1e-14;

/// Orthonormal basis of a left nullspace, with the cutoff that produced it.
#[derive(Debug, Clone)]
pub struct NullspaceBasis {
    /// Rows are mutually orthonormal basis vectors of `{v : v M = 0}`.
    pub vectors: Mat,
    /// Relative singular-value cutoff used.
    pub tol: f64,
    /// Shape of the matrix the basis was computed from.
    pub source_shape: (usize, usize),
}

impl NullspaceBasis {
    pub fn dim(&self) -> usize {
        if self.vectors.cols() == 0 {
            0
        } else {
            self.vectors.rows()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.dim() == 0
    }
}

/// One-sided Jacobi SVD of `a` interpreted column-wise.
///
/// Orthogonalizes the columns of `a` by plane rotations applied from the
/// right, accumulating them into `v`. On return `a_rot = a * v` has
/// pairwise orthogonal columns with norms `sigma`, sorted descending.
struct JacobiSvd {
    /// Column norms of the rotated matrix, descending.
    sigma: Vec<f64>,
    /// Accumulated rotation: orthogonal `p x p`, stored as columns.
    v_cols: Vec<Vec<f64>>,
    /// Rotated input columns (`d`-vectors); column `j` equals `sigma[j] * u_j`.
    a_cols: Vec<Vec<f64>>,
}

fn one_sided_jacobi(a: &Mat) -> Result<JacobiSvd> {
    let d = a.rows();
    let p = a.cols();
    if d == 0 || p == 0 {
        return Err(Error::EmptyMatrix { op: "svd" });
    }
    if !a.all_finite() {
        return Err(Error::NonFinite { op: "svd" });
    }

    let mut a_cols: Vec<Vec<f64>> = (0..p).map(|j| (0..d).map(|i| a.at(i, j)).collect()).collect();
    let mut v_cols: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            e
        })
        .collect();

    // Total squared norm is invariant under the rotations; columns whose
    // squared norm falls below machine noise relative to it are numerically
    // zero and must not keep absorbing rotations, or rank-deficient inputs
    // never converge.
    let frob2: f64 = a_cols.iter().map(|c| dot(c, c)).sum();
    let negligible = (f64::EPSILON * f64::EPSILON) * frob2;

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..p {
            for j in (i + 1)..p {
                let (left, right) = a_cols.split_at_mut(j);
                let ci = &mut left[i];
                let cj = &mut right[0];
                let aii = dot(ci, ci);
                let ajj = dot(cj, cj);
                let aij = dot(ci, cj);
                if aii <= negligible || ajj <= negligible {
                    continue;
                }
                if fmath::abs(aij) <= ROTATION_EPS * fmath::sqrt(aii * ajj) {
                    continue;
                }
                rotated = true;
                let tau = (ajj - aii) / (2.0 * aij);
                let t = if tau >= 0.0 {
                    1.0 / (tau + fmath::sqrt(1.0 + tau * tau))
                } else {
                    -1.0 / (-tau + fmath::sqrt(1.0 + tau * tau))
                };
                let c = 1.0 / fmath::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(ci, cj, c, s);
                let (vleft, vright) = v_cols.split_at_mut(j);
                rotate(&mut vleft[i], &mut vright[0], c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { op: "svd", sweeps: MAX_SWEEPS });
    }

    let mut order: Vec<usize> = (0..p).collect();
    let norms: Vec<f64> = a_cols.iter().map(|c| l2_norm(c)).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).expect("finite").then(x.cmp(&y)));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let a_sorted: Vec<Vec<f64>> = order.iter().map(|&j| a_cols[j].clone()).collect();
    let v_sorted: Vec<Vec<f64>> = order.iter().map(|&j| v_cols[j].clone()).collect();
    Ok(JacobiSvd { sigma, v_cols: v_sorted, a_cols: a_sorted })
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
        let xv = *xi;
        let yv = *yi;
        *xi = c * xv - s * yv;
        *yi = s * xv + c * yv;
    }
}

fn null_cutoff(sigma: &[f64], tol: f64) -> f64 {
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let cutoff = tol * sigma_max;
    // A singular value sitting on the cutoff counts as zero (smaller rank,
    // larger nullspace); flag near-ties since they make rank fragile.
    for &s in sigma {
        if s > 0.0 && cutoff > 0.0 && fmath::abs(s - cutoff) <= 1e-3 * cutoff {
            log::warn!("singular value {s:e} within 0.1% of cutoff {cutoff:e}; resolving to null");
        }
    }
    cutoff
}

/// Orthonormal basis of `{v in R^(1xp) : v M = 0}` for `M` of shape `p x d`,
/// via the SVD of `M^T`.
pub fn nullspace(m: &Mat, tol: f64) -> Result<NullspaceBasis> {
    if tol <= 0.0 {
        return Err(Error::Usage(alloc::format!("nullspace: tol must be > 0, got {tol}")));
    }
    let p = m.rows();
    let svd = one_sided_jacobi(&m.transpose())?;
    let cutoff = null_cutoff(&svd.sigma, tol);
    let mut rows: Vec<f64> = Vec::new();
    let mut count = 0;
    for (j, &s) in svd.sigma.iter().enumerate() {
        if s <= cutoff {
            rows.extend_from_slice(&svd.v_cols[j]);
            count += 1;
        }
    }
    Ok(NullspaceBasis {
        vectors: Mat::from_vec(count, if count == 0 { 0 } else { p }, rows)?,
        tol,
        source_shape: m.dims(),
    })
}

/// Number of singular values above `tol * sigma_max`.
pub fn numerical_rank(m: &Mat, tol: f64) -> Result<usize> {
    let svd = one_sided_jacobi(&m.transpose())?;
    let cutoff = null_cutoff(&svd.sigma, tol);
    Ok(svd.sigma.iter().filter(|&&s| s > cutoff).count())
}

/// Least-squares membership of `r` in the row space of `m`.
///
/// Returns `(contained, residual)` where `residual = ||r - r_hat||` for the
/// orthogonal projection `r_hat` onto the row space, and containment means
/// `residual <= tol * ||r||`.
pub fn row_space_contains(m: &Mat, r: &[f64], tol: f64) -> Result<(bool, f64)> {
    if r.len() != m.cols() {
        return Err(Error::ShapeMismatch { op: "row_space_contains", lhs: m.dims(), rhs: (1, r.len()) });
    }
    let svd = one_sided_jacobi(&m.transpose())?;
    let cutoff = null_cutoff(&svd.sigma, DEFAULT_TOL);
    let mut residual: Vec<f64> = r.to_vec();
    for (j, &s) in svd.sigma.iter().enumerate() {
        if s <= cutoff {
            break;
        }
        let u: Vec<f64> = svd.a_cols[j].iter().map(|x| x / s).collect();
        let coef = dot(&residual, &u);
        for (res, &uv) in residual.iter_mut().zip(&u) {
            *res -= coef * uv;
        }
    }
    let res_norm = l2_norm(&residual);
    Ok((res_norm <= tol * l2_norm(r), res_norm))
}

/// `max|M - M^T| <= tol * max|M|` for square `M`.
pub fn is_symmetric(m: &Mat, tol: f64) -> Result<bool> {
    if m.rows() != m.cols() {
        return Err(Error::Usage(alloc::format!(
            "is_symmetric: matrix must be square, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(symmetry_residual(m) <= tol * m.max_abs())
}

/// `max|M - M^T|`, the absolute asymmetry.
pub fn symmetry_residual(m: &Mat) -> f64 {
    let n = m.rows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max(fmath::abs(m.at(i, j) - m.at(j, i)));
        }
    }
    worst
}

/// Orthonormal basis of the orthogonal complement of the span of the rows
/// of `rows`. Empty iff the rows span the full space.
pub fn orthogonal_complement(rows: &Mat) -> Result<NullspaceBasis> {
    // w is orthogonal to every row of R exactly when w R^T = 0.
    let mut basis = nullspace(&rows.transpose(), DEFAULT_TOL)?;
    basis.source_shape = rows.dims();
    Ok(basis)
}

/// Eigendecomposition `A = P diag(lambda) P^T` of a symmetric matrix via
/// cyclic Jacobi rotations. Eigenvalues are returned descending; `P`'s
/// columns are the corresponding eigenvectors.
pub fn sym_eigen(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::Usage(alloc::format!(
            "sym_eigen: matrix must be square, got {}x{}",
            n,
            a.cols()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyMatrix { op: "sym_eigen" });
    }
    let mut b = a.clone();
    let mut p = Mat::identity(n);
    let scale = a.max_abs().max(f64::MIN_POSITIVE);

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let bij = b.at(i, j);
                if fmath::abs(bij) <= 1e-14 * scale {
                    continue;
                }
                rotated = true;
                let tau = (b.at(j, j) - b.at(i, i)) / (2.0 * bij);
                let t = if tau >= 0.0 {
                    1.0 / (tau + fmath::sqrt(1.0 + tau * tau))
                } else {
                    -1.0 / (-tau + fmath::sqrt(1.0 + tau * tau))
                };
                let c = 1.0 / fmath::sqrt(1.0 + t * t);
                let s = c * t;
                // B <- J^T B J with J the (i, j) rotation
                for k in 0..n {
                    let bki = b.at(k, i);
                    let bkj = b.at(k, j);
                    b.set(k, i, c * bki - s * bkj);
                    b.set(k, j, s * bki + c * bkj);
                }
                for k in 0..n {
                    let bik = b.at(i, k);
                    let bjk = b.at(j, k);
                    b.set(i, k, c * bik - s * bjk);
                    b.set(j, k, s * bik + c * bjk);
                }
                for k in 0..n {
                    let pki = p.at(k, i);
                    let pkj = p.at(k, j);
                    p.set(k, i, c * pki - s * pkj);
                    p.set(k, j, s * pki + c * pkj);
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { op: "sym_eigen", sweeps: MAX_SWEEPS });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| b.at(i, i)).collect();
    order.sort_by(|&x, &y| diag[y].partial_cmp(&diag[x]).expect("finite").then(x.cmp(&y)));
    let eigvals: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut eigvecs = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            eigvecs.set(k, dst, p.at(k, src));
        }
    }
    Ok((eigvals, eigvecs))
}
