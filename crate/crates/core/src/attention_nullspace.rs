//! Constructive head-level nullspace noise and its certification.
//!
//! A multi-head self-attention layer admits a nonzero token perturbation
//! `W` with `head_i(X + W) = head_i(X)` for every head and every input
//! when three conditions hold: each `Q_i K_i^T` is symmetric, the row
//! space of each `V_i^T` sits inside the row space of `Q_i K_i^T`, and two
//! heads share a row direction. Under those conditions the summed row
//! spaces cannot fill R^d, so a unit vector `w` orthogonal to all of them
//! exists; any `W` whose rows are multiples of `w` kills both the score
//! cross terms and `W V_i`.
//!
//! [`synth_head_params`] builds parameters certified to satisfy the
//! conditions, [`check_conditions`] measures them on arbitrary parameters,
//! [`construct_null_w`] extracts `w` and assembles `W`, and
//! [`verify_head_invariance`] confirms the conclusion numerically.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fmath;
use crate::linalg;
use crate::mat::{l2_norm, Mat};
use crate::rng::normal;
use crate::vit;

/// Per-head query/key/value projections of one attention layer.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub q: Vec<Mat>,
    pub k: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl HeadParams {
    pub fn heads(&self) -> usize {
        self.q.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.q[0].rows()
    }

    /// `Q_i K_i^T` for head `i`.
    pub fn score_matrix(&self, i: usize) -> Result<Mat> {
        self.q[i].matmul(&self.k[i].transpose())
    }
}

/// Numerical evidence for the three conditions.
#[derive(Debug, Clone)]
pub struct ConditionReport {
    /// Relative asymmetry `max|M - M^T| / max|M|` of each score matrix.
    pub symmetry_residuals: Vec<f64>,
    /// Worst relative row-space-inclusion residual of `V_i`'s columns.
    pub value_inclusion_residuals: Vec<f64>,
    /// Best colinearity witness `(m, n, k, relative residual)`: row `k` of
    /// head `m`'s score matrix resolved in head `n`'s row space.
    pub colinearity: (usize, usize, usize, f64),
    /// Rank of the stacked score-matrix rows.
    pub dim_s: usize,
    /// Dimension of the orthogonal complement; `dim_s + dim_s_perp = d`.
    pub dim_s_perp: usize,
}

impl ConditionReport {
    pub fn condition1_passes(&self, tol: f64) -> bool {
        self.symmetry_residuals.iter().all(|&r| r < tol)
    }

    pub fn condition2_passes(&self, tol: f64) -> bool {
        self.value_inclusion_residuals.iter().all(|&r| r < tol)
    }

    pub fn condition3_passes(&self, tol: f64) -> bool {
        self.colinearity.3 < tol
    }

    pub fn all_pass(&self, tol: f64) -> bool {
        self.condition1_passes(tol) && self.condition2_passes(tol) && self.condition3_passes(tol)
    }
}

/// Head-invariant noise: a unit direction `w` and the token matrix whose
/// rows are multiples of it.
#[derive(Debug, Clone)]
pub struct NullW {
    /// Unit vector orthogonal to every score-matrix row space.
    pub w: Vec<f64>,
    /// `n_tokens x d`, row `j` equals `row_scales[j] * w`.
    pub rows: Mat,
    pub row_scales: Vec<f64>,
}

/// Draws head parameters that satisfy all three conditions by
/// construction:
///
/// * `A_i = G_i G_i^T + d_k I` is symmetric positive definite; with its
///   eigendecomposition `A_i = P D P^T`, setting `Q_i = B_i P` and
///   `K_i = B_i P D` makes `Q_i K_i^T = B_i A_i B_i^T` symmetric with row
///   space exactly `col(B_i)`;
/// * heads 0 and 1 share `B`, which forces the shared-row-direction
///   condition;
/// * `V_i = (B_i A_i B_i^T) G'_i` puts `V_i`'s columns inside the score
///   row space.
pub fn synth_head_params(
    d: usize,
    h: usize,
    d_k: usize,
    d_v: usize,
    rng: &mut ChaCha8Rng,
) -> Result<HeadParams> {
    if h * d_k != d {
        return Err(Error::Usage(alloc::format!(
            "need h * d_k = d, got {h} * {d_k} != {d}"
        )));
    }
    if d_k >= d {
        return Err(Error::Usage(alloc::format!(
            "d_k = {d_k} leaves no room for a complement in dimension {d}"
        )));
    }
    if d_v > d_k {
        return Err(Error::Usage(alloc::format!("d_v = {d_v} exceeds d_k = {d_k}")));
    }
    if h < 2 {
        return Err(Error::Usage(alloc::string::String::from(
            "colinearity requires at least two heads",
        )));
    }

    let gauss = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        Mat::from_vec(r, c, (0..r * c).map(|_| normal(rng)).collect()).expect("sized")
    };

    let b_shared = gauss(rng, d, d_k);
    let mut q = Vec::with_capacity(h);
    let mut k = Vec::with_capacity(h);
    let mut v = Vec::with_capacity(h);
    for head in 0..h {
        let b = if head <= 1 { b_shared.clone() } else { gauss(rng, d, d_k) };
        let g = gauss(rng, d_k, d_k);
        let mut a = g.matmul(&g.transpose())?;
        for i in 0..d_k {
            a.set(i, i, a.at(i, i) + d_k as f64);
        }
        let (eigvals, p) = linalg::sym_eigen(&a)?;
        // K = B P D with D the eigenvalue diagonal
        let mut pd = p.clone();
        for row in 0..d_k {
            for col in 0..d_k {
                pd.set(row, col, pd.at(row, col) * eigvals[col]);
            }
        }
        let qi = b.matmul(&p)?;
        let ki = b.matmul(&pd)?;
        let bab = b.matmul(&a)?.matmul(&b.transpose())?;
        // Normalize the score matrix to unit Frobenius norm (equivalent to
        // rescaling B, so the construction is unchanged); without this the
        // raw magnitudes at d = 64 push float roundoff in the w-orthogonality
        // checks above the certified tolerances.
        let s = 1.0 / fmath::sqrt(bab.frob_norm());
        let qi = qi.scale(s);
        let ki = ki.scale(s);
        let vi = bab.scale(s * s).matmul(&gauss(rng, d, d_v))?;
        let vi = vi.scale(1.0 / vi.frob_norm());
        q.push(qi);
        k.push(ki);
        v.push(vi);
    }
    Ok(HeadParams { q, k, v })
}

/// Measures the three conditions on arbitrary head parameters.
pub fn check_conditions(params: &HeadParams) -> Result<ConditionReport> {
    let h = params.heads();
    let d = params.embed_dim();
    let scores: Vec<Mat> = (0..h).map(|i| params.score_matrix(i)).collect::<Result<_>>()?;

    let symmetry_residuals: Vec<f64> = scores
        .iter()
        .map(|s| {
            let denom = s.max_abs().max(f64::MIN_POSITIVE);
            linalg::symmetry_residual(s) / denom
        })
        .collect();

    let mut value_inclusion_residuals = Vec::with_capacity(h);
    for i in 0..h {
        let vt = params.v[i].transpose();
        let mut worst = 0.0f64;
        for r in 0..vt.rows() {
            let row = vt.row(r);
            let norm = l2_norm(row);
            if norm == 0.0 {
                continue;
            }
            let (_, resid) = linalg::row_space_contains(&scores[i], row, 1e-9)?;
            worst = worst.max(resid / norm);
        }
        value_inclusion_residuals.push(worst);
    }

    // Colinearity: best (m, n, k) witness over ordered head pairs, probing
    // each head's largest row.
    let mut best = (0usize, 0usize, 0usize, f64::INFINITY);
    for m in 0..h {
        let mut k_best = 0usize;
        let mut k_norm = 0.0f64;
        for r in 0..d {
            let norm = l2_norm(scores[m].row(r));
            if norm > k_norm {
                k_norm = norm;
                k_best = r;
            }
        }
        if k_norm == 0.0 {
            continue;
        }
        for n in 0..h {
            if n == m {
                continue;
            }
            let (_, resid) = linalg::row_space_contains(&scores[n], scores[m].row(k_best), 1e-9)?;
            let rel = resid / k_norm;
            if rel < best.3 {
                best = (m, n, k_best, rel);
            }
        }
    }

    let stacked: Vec<&Mat> = scores.iter().collect();
    let stacked = Mat::vstack(&stacked)?;
    let dim_s = linalg::numerical_rank(&stacked, linalg::DEFAULT_TOL)?;

    Ok(ConditionReport {
        symmetry_residuals,
        value_inclusion_residuals,
        colinearity: best,
        dim_s,
        dim_s_perp: d - dim_s,
    })
}

/// Extracts a unit `w` orthogonal to every score row space and builds the
/// token noise matrix with the given per-row scales.
pub fn construct_null_w(params: &HeadParams, row_scales: &[f64]) -> Result<NullW> {
    let h = params.heads();
    let scores: Vec<Mat> = (0..h).map(|i| params.score_matrix(i)).collect::<Result<_>>()?;
    let refs: Vec<&Mat> = scores.iter().collect();
    let stacked = Mat::vstack(&refs)?;
    let complement = linalg::orthogonal_complement(&stacked)?;
    if complement.is_empty() {
        return Err(Error::EmptyComplement);
    }
    let w = complement.vectors.row(0).to_vec();
    let d = w.len();
    let mut rows = Mat::zeros(row_scales.len(), d);
    for (j, &s) in row_scales.iter().enumerate() {
        for (dst, &wv) in rows.row_mut(j).iter_mut().zip(&w) {
            *dst = s * wv;
        }
    }
    Ok(NullW { w, rows, row_scales: row_scales.to_vec() })
}

/// Max absolute per-head output deviation `|head_i(X + W) - head_i(X)|`.
pub fn verify_head_invariance(params: &HeadParams, x: &Mat, w: &Mat) -> Result<f64> {
    if x.dims() != w.dims() {
        return Err(Error::ShapeMismatch { op: "verify_head_invariance", lhs: x.dims(), rhs: w.dims() });
    }
    let noised = x.add(w)?;
    let mut worst = 0.0f64;
    for i in 0..params.heads() {
        let clean = vit::attention_head(x, &params.q[i], &params.k[i], &params.v[i])?;
        let shifted = vit::attention_head(&noised, &params.q[i], &params.k[i], &params.v[i])?;
        worst = worst.max(shifted.sub(&clean)?.max_abs());
    }
    Ok(worst)
}

/// Max-abs of the score cross terms
/// `W M X^T + X M W^T + W M W^T` with `M = Q_i K_i^T`, maximized over heads.
pub fn cross_term_residual(params: &HeadParams, x: &Mat, w: &Mat) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..params.heads() {
        let m = params.score_matrix(i)?;
        let wm = w.matmul(&m)?;
        let xm = x.matmul(&m)?;
        let total = wm
            .matmul(&x.transpose())?
            .add(&xm.matmul(&w.transpose())?)?
            .add(&wm.matmul(&w.transpose())?)?;
        worst = worst.max(total.max_abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Substreams;

    fn rng(seed: u64) -> ChaCha8Rng {
        Substreams::new(seed).stream("prop1")
    }

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| normal(rng)).collect()).unwrap()
    }

    #[test]
    fn synth_passes_all_conditions() {
        let mut r = rng(1);
        let params = synth_head_params(64, 4, 16, 16, &mut r).unwrap();
        let report = check_conditions(&params).unwrap();
        assert!(report.all_pass(1e-9), "{report:?}");
        assert!(report.dim_s <= 48, "dim_s = {}", report.dim_s);
        assert!(report.dim_s_perp >= 16);
        assert_eq!(report.dim_s + report.dim_s_perp, 64);
    }

    #[test]
    fn synth_score_matrices_are_symmetric() {
        let mut r = rng(2);
        let params = synth_head_params(24, 3, 8, 8, &mut r).unwrap();
        for i in 0..3 {
            let s = params.score_matrix(i).unwrap();
            assert!(linalg::symmetry_residual(&s) < 1e-10 * s.max_abs());
        }
    }

    #[test]
    fn random_params_fail_symmetry() {
        let mut r = rng(3);
        let params = HeadParams {
            q: (0..2).map(|_| random_mat(&mut r, 16, 8)).collect(),
            k: (0..2).map(|_| random_mat(&mut r, 16, 8)).collect(),
            v: (0..2).map(|_| random_mat(&mut r, 16, 8)).collect(),
        };
        let report = check_conditions(&params).unwrap();
        assert!(!report.condition1_passes(1e-9));
        assert!(report.symmetry_residuals.iter().all(|&x| x > 1e-3));
    }

    #[test]
    fn tampered_values_fail_inclusion() {
        let mut r = rng(4);
        let mut params = synth_head_params(24, 3, 8, 8, &mut r).unwrap();
        params.v[1] = random_mat(&mut r, 24, 8);
        let report = check_conditions(&params).unwrap();
        assert!(report.condition1_passes(1e-9));
        assert!(!report.condition2_passes(1e-9));
    }

    #[test]
    fn rejects_impossible_shapes() {
        let mut r = rng(5);
        assert!(synth_head_params(8, 1, 8, 8, &mut r).is_err()); // d_k == d
        assert!(synth_head_params(9, 2, 4, 4, &mut r).is_err()); // h*d_k != d
        assert!(synth_head_params(8, 2, 4, 6, &mut r).is_err()); // d_v > d_k
    }

    #[test]
    fn null_w_annihilates_scores_and_values() {
        let mut r = rng(6);
        let params = synth_head_params(32, 4, 8, 8, &mut r).unwrap();
        let scales = [1.0, -2.0, 100.0, 0.25, 7.5];
        let nw = construct_null_w(&params, &scales).unwrap();
        assert!((l2_norm(&nw.w) - 1.0).abs() < 1e-12);
        let w_row = Mat::row_vec(nw.w.clone());
        for i in 0..params.heads() {
            let s = params.score_matrix(i).unwrap();
            assert!(w_row.matmul(&s).unwrap().max_abs() < 1e-9);
            assert!(w_row.matmul(&params.v[i]).unwrap().max_abs() < 1e-9);
            assert!(nw.rows.matmul(&params.v[i]).unwrap().max_abs() < 1e-8);
        }
    }

    #[test]
    fn zero_scales_give_zero_noise() {
        let mut r = rng(7);
        let params = synth_head_params(32, 4, 8, 8, &mut r).unwrap();
        let nw = construct_null_w(&params, &[0.0; 6]).unwrap();
        assert_eq!(nw.rows.max_abs(), 0.0);
        let x = random_mat(&mut r, 6, 32);
        assert_eq!(verify_head_invariance(&params, &x, &nw.rows).unwrap(), 0.0);
    }

    #[test]
    fn head_outputs_are_invariant_under_null_w() {
        let mut r = rng(8);
        let params = synth_head_params(32, 4, 8, 8, &mut r).unwrap();
        let scales: Vec<f64> = (0..5).map(|_| 200.0 * (crate::rng::normal(&mut r))).collect();
        let nw = construct_null_w(&params, &scales).unwrap();
        let x = random_mat(&mut r, 5, 32);
        let dev = verify_head_invariance(&params, &x, &nw.rows).unwrap();
        assert!(dev < 1e-8, "dev {dev}");

        // a random matrix of the same norm is nowhere near invariant
        let mut control = random_mat(&mut r, 5, 32);
        let factor = nw.rows.frob_norm() / control.frob_norm();
        control = control.scale(factor);
        let dev_control = verify_head_invariance(&params, &x, &control).unwrap();
        assert!(dev_control > 1e-3, "control dev {dev_control}");
    }

    #[test]
    fn cross_terms_cancel() {
        let mut r = rng(9);
        let params = synth_head_params(32, 4, 8, 8, &mut r).unwrap();
        let nw = construct_null_w(&params, &[3.0, -1.0, 0.5, 10.0]).unwrap();
        for _ in 0..20 {
            let x = random_mat(&mut r, 4, 32);
            assert!(cross_term_residual(&params, &x, &nw.rows).unwrap() < 1e-9);
        }
    }

    #[test]
    fn invariance_survives_large_scaling() {
        let mut r = rng(10);
        let params = synth_head_params(32, 4, 8, 8, &mut r).unwrap();
        let nw = construct_null_w(&params, &[1.0, 1.0, 1.0]).unwrap();
        let x = random_mat(&mut r, 3, 32);
        let big = nw.rows.scale(1e3);
        let dev = verify_head_invariance(&params, &x, &big).unwrap();
        assert!(dev < 1e-6, "dev {dev}");
    }
}
