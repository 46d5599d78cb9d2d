//! End-to-end invariance checks at the toy dimensions: the constructive
//! head-level noise at `d = 64, h = 4`, and the interplay between the
//! constructed noise and the model's own attention heads.

mod common;

use common::random_mat;
use nsvit_core::attention_nullspace::{
    check_conditions, construct_null_w, cross_term_residual, synth_head_params,
    verify_head_invariance,
};
use nsvit_core::rng::{normal, Substreams};
use nsvit_core::vit::attention_head;

#[test]
fn full_width_synthesis_certifies_and_holds() {
    let subs = Substreams::new(50);
    let mut rng = subs.stream("prop1");
    let params = synth_head_params(64, 4, 16, 16, &mut rng).unwrap();

    let report = check_conditions(&params).unwrap();
    assert!(report.all_pass(1e-9), "{report:?}");
    assert!(report.dim_s <= 48);
    assert_eq!(report.dim_s + report.dim_s_perp, 64);

    // random row scales in [-100, 100]
    let scales: Vec<f64> = (0..6)
        .map(|_| 100.0 * (2.0 * rand::Rng::gen::<f64>(&mut rng) - 1.0))
        .collect();
    let nw = construct_null_w(&params, &scales).unwrap();

    let mut worst = 0.0f64;
    for trial in 0..100 {
        let x = random_mat(&mut rng, 6, 64);
        let dev = verify_head_invariance(&params, &x, &nw.rows).unwrap();
        worst = worst.max(dev);
        if trial < 10 {
            assert!(cross_term_residual(&params, &x, &nw.rows).unwrap() < 1e-9);
        }
    }
    assert!(worst < 1e-8, "worst deviation {worst}");
}

#[test]
fn control_noise_breaks_invariance() {
    let subs = Substreams::new(51);
    let mut rng = subs.stream("prop1");
    let params = synth_head_params(64, 4, 16, 16, &mut rng).unwrap();
    let nw = construct_null_w(&params, &[5.0, -3.0, 8.0, 1.0]).unwrap();
    let x = random_mat(&mut rng, 4, 64);

    let mut control = random_mat(&mut rng, 4, 64);
    control = control.scale(nw.rows.frob_norm() / control.frob_norm());
    let dev = verify_head_invariance(&params, &x, &control).unwrap();
    assert!(dev > 1e-3, "control deviation {dev}");
}

#[test]
fn per_head_outputs_match_under_scaled_noise() {
    // the attention_head entry point itself, head by head, at 1e3 scale
    let subs = Substreams::new(52);
    let mut rng = subs.stream("prop1");
    let params = synth_head_params(64, 4, 16, 16, &mut rng).unwrap();
    let scales: Vec<f64> = (0..5).map(|_| normal(&mut rng)).collect();
    let nw = construct_null_w(&params, &scales).unwrap();
    let x = random_mat(&mut rng, 5, 64);
    let noised = x.add(&nw.rows.scale(1e3)).unwrap();
    for i in 0..4 {
        let clean = attention_head(&x, &params.q[i], &params.k[i], &params.v[i]).unwrap();
        let shifted = attention_head(&noised, &params.q[i], &params.k[i], &params.v[i]).unwrap();
        let dev = shifted.sub(&clean).unwrap().max_abs();
        assert!(dev < 1e-6, "head {i}: deviation {dev}");
    }
}
