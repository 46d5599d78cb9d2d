//! Independent checks of the nullspace machinery: a Gaussian-elimination
//! oracle, the vector-space axioms, and the toy-scale patch nullspace.

mod common;

use common::random_mat;
use nsvit_core::linalg::{self, DEFAULT_TOL};
use nsvit_core::rng::Substreams;
use nsvit_core::Mat;

/// Left-nullspace basis by row reduction of `M^T` (solving `M^T x = 0`),
/// entirely independent of the SVD path.
fn rref_left_nullspace(m: &Mat) -> Vec<Vec<f64>> {
    let a = m.transpose();
    let rows = a.rows();
    let cols = a.cols();
    let mut r: Vec<Vec<f64>> = (0..rows).map(|i| a.row(i).to_vec()).collect();

    let mut pivot_cols = Vec::new();
    let mut lead = 0usize;
    for row in 0..rows {
        if lead >= cols {
            break;
        }
        // partial pivot
        let mut best = row;
        for cand in row..rows {
            if r[cand][lead].abs() > r[best][lead].abs() {
                best = cand;
            }
        }
        if r[best][lead].abs() < 1e-12 {
            lead += 1;
            // retry this row with the next column
            let mut advanced = false;
            for next in lead..cols {
                let mut b2 = row;
                for cand in row..rows {
                    if r[cand][next].abs() > r[b2][next].abs() {
                        b2 = cand;
                    }
                }
                if r[b2][next].abs() >= 1e-12 {
                    lead = next;
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                break;
            }
            let mut b3 = row;
            for cand in row..rows {
                if r[cand][lead].abs() > r[b3][lead].abs() {
                    b3 = cand;
                }
            }
            r.swap(row, b3);
        } else {
            r.swap(row, best);
        }
        let pivot = r[row][lead];
        for v in r[row].iter_mut() {
            *v /= pivot;
        }
        for other in 0..rows {
            if other != row {
                let factor = r[other][lead];
                if factor != 0.0 {
                    let src = r[row].clone();
                    for (dst, s) in r[other].iter_mut().zip(&src) {
                        *dst -= factor * s;
                    }
                }
            }
        }
        pivot_cols.push(lead);
        lead += 1;
    }

    // free columns parameterize the nullspace
    let mut basis = Vec::new();
    for free in 0..cols {
        if pivot_cols.contains(&free) {
            continue;
        }
        let mut v = vec![0.0; cols];
        v[free] = 1.0;
        for (prow, &pcol) in pivot_cols.iter().enumerate() {
            v[pcol] = -r[prow][free];
        }
        basis.push(v);
    }
    basis
}

#[test]
fn svd_nullspace_matches_row_reduction_oracle() {
    // 6x4 instance with known deficiency: rows 4 and 5 are combinations
    let subs = Substreams::new(40);
    let mut rng = subs.stream("oracle");
    let mut m = random_mat(&mut rng, 6, 4);
    for j in 0..4 {
        let combo = m.at(0, j) + 2.0 * m.at(1, j);
        m.set(4, j, combo);
        let combo2 = m.at(2, j) - m.at(3, j);
        m.set(5, j, combo2);
    }

    let oracle = rref_left_nullspace(&m);
    let basis = linalg::nullspace(&m, DEFAULT_TOL).unwrap();
    assert_eq!(basis.dim(), oracle.len());
    assert_eq!(basis.dim(), 2);

    // every oracle vector is annihilated and lies in the SVD basis span
    for v in &oracle {
        let vm = Mat::row_vec(v.clone()).matmul(&m).unwrap();
        assert!(vm.max_abs() < 1e-9, "oracle vector not in nullspace");
        // project onto the basis and compare
        let mut residual = v.clone();
        for b in 0..basis.dim() {
            let row = basis.vectors.row(b);
            let coef: f64 = residual.iter().zip(row).map(|(a, c)| a * c).sum();
            for (res, &c) in residual.iter_mut().zip(row) {
                *res -= coef * c;
            }
        }
        let leftover: f64 = residual.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(leftover < 1e-9, "oracle vector outside SVD basis span: {leftover}");
    }
}

#[test]
fn toy_patch_matrix_has_full_deficiency() {
    // 192x64 random full-column-rank matrix: left nullspace of dim 128
    let subs = Substreams::new(41);
    let mut rng = subs.stream("oracle");
    let m = random_mat(&mut rng, 192, 64);
    let basis = linalg::nullspace(&m, DEFAULT_TOL).unwrap();
    assert_eq!(basis.dim(), 128);
    let prod = basis.vectors.matmul(&m).unwrap();
    assert!(prod.max_abs() < 1e-10, "residual {}", prod.max_abs());
    assert_eq!(linalg::numerical_rank(&m, DEFAULT_TOL).unwrap(), 64);
}

#[test]
fn nullspace_satisfies_vector_space_axioms() {
    let subs = Substreams::new(42);
    let mut rng = subs.stream("oracle");
    let m = random_mat(&mut rng, 20, 8);
    let basis = linalg::nullspace(&m, DEFAULT_TOL).unwrap();
    assert_eq!(basis.dim(), 12);
    let tol = 1e-10 * m.frob_norm();

    // the zero vector maps to zero
    let zero = Mat::zeros(1, 20);
    assert!(zero.matmul(&m).unwrap().max_abs() <= tol);

    // closure under addition: (u + v) M = 0
    let u = basis.vectors.row(0).to_vec();
    let v = basis.vectors.row(5).to_vec();
    let sum: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
    assert!(Mat::row_vec(sum).matmul(&m).unwrap().max_abs() <= tol);

    // closure under scalar multiplication: (c u) M = 0
    for c in [-3.5, 0.0, 1e6] {
        let scaled: Vec<f64> = u.iter().map(|a| c * a).collect();
        let residual = Mat::row_vec(scaled).matmul(&m).unwrap().max_abs();
        assert!(residual <= tol * c.abs().max(1.0), "c={c}: {residual}");
    }
}
