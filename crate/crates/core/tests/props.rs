//! Property tests over the numeric plumbing.

mod common;

use nsvit_core::linalg::{self, DEFAULT_TOL};
use nsvit_core::noise::{permute_noise, NoiseVector, Provenance};
use nsvit_core::rng::Substreams;
use nsvit_core::{Mat, Tape};
use proptest::prelude::*;

fn finite_vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-50.0f64..50.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_always_sum_to_one(vals in finite_vals(24)) {
        let mut tape = Tape::new();
        let x = tape.leaf_vec(4, 6, vals, false).unwrap();
        let s = tape.softmax_rows(x).unwrap();
        for i in 0..4 {
            let sum: f64 = tape.value(s)[i * 6..(i + 1) * 6].iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn rank_nullity_holds(vals in finite_vals(48), deficient in 0usize..3) {
        let mut m = Mat::from_vec(8, 6, vals).unwrap();
        // optionally make rows dependent to vary the rank
        for d in 0..deficient {
            let src = m.row(d).to_vec();
            for (j, &v) in src.iter().enumerate() {
                m.set(7 - d, j, 2.0 * v);
            }
        }
        let rank = linalg::numerical_rank(&m, DEFAULT_TOL).unwrap();
        let dim = linalg::nullspace(&m, DEFAULT_TOL).unwrap().dim();
        prop_assert_eq!(rank + dim, 8);
    }

    #[test]
    fn nullspace_rows_are_orthonormal_annihilators(vals in finite_vals(40)) {
        let m = Mat::from_vec(10, 4, vals).unwrap();
        let basis = linalg::nullspace(&m, DEFAULT_TOL).unwrap();
        let prod = basis.vectors.matmul(&m).unwrap();
        prop_assert!(prod.max_abs() <= DEFAULT_TOL * m.frob_norm().max(1e-30));
        for i in 0..basis.dim() {
            for j in i..basis.dim() {
                let d: f64 = basis
                    .vectors
                    .row(i)
                    .iter()
                    .zip(basis.vectors.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                prop_assert!((d - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn permutation_preserves_element_multiset(vals in finite_vals(32), seed in 0u64..1000) {
        let v = NoiseVector::new(Mat::from_vec(4, 8, vals).unwrap(), Provenance::Learned);
        let subs = Substreams::new(seed);
        let p = permute_noise(&v, &mut subs.stream("permutation"));
        let mut a = v.values.as_slice().to_vec();
        let mut b = p.values.as_slice().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn cross_entropy_is_nonnegative_and_bounded_by_lse(vals in finite_vals(30), label in 0usize..6) {
        let mut tape = Tape::new();
        let z = tape.leaf_vec(5, 6, vals, false).unwrap();
        let l = tape.cross_entropy(z, &[label, label, label, label, label]).unwrap();
        prop_assert!(tape.item(l) >= -1e-12);
    }
}
