//! Finite-difference oracles for every differentiable operation and for
//! the full model loss. Elementwise and single-op checks must agree with
//! central differences to 1e-6 relative; the end-to-end model gradient to
//! 1e-3.

mod common;

use common::{finite_diff_grad, max_rel_err, random_image, random_mat, random_vec};
use nsvit_core::data::LabeledImages;
use nsvit_core::rng::Substreams;
use nsvit_core::tensor::GeluKind;
use nsvit_core::vit::{self, ModelConfig, ViTParams};
use nsvit_core::{Mat, Tape, TensorId};

const OP_H: f64 = 1e-5;
const OP_TOL: f64 = 1e-6;

/// Checks d(f(x))/dx against finite differences, where the scalar readout
/// is a fixed random linear functional of the op output (this exercises
/// the whole Jacobian, not just the row sums).
fn check_op(
    name: &str,
    seed: u64,
    rows: usize,
    cols: usize,
    build: impl Fn(&mut Tape, TensorId) -> TensorId,
) {
    let subs = Substreams::new(seed);
    let mut rng = subs.stream("gradcheck");
    let x = random_vec(&mut rng, rows * cols);

    let scalar = |vals: &[f64], weights: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let leaf = tape.leaf_vec(rows, cols, vals.to_vec(), false).unwrap();
        let out = build(&mut tape, leaf);
        let (r, c) = tape.dims(out);
        assert_eq!(weights.len(), r * c, "{name}: weight size");
        tape.value(out).iter().zip(weights).map(|(v, w)| v * w).sum()
    };

    // readout weights sized to the op output
    let mut probe_tape = Tape::new();
    let probe_leaf = probe_tape.leaf_vec(rows, cols, x.clone(), false).unwrap();
    let probe_out = build(&mut probe_tape, probe_leaf);
    let (or, oc) = probe_tape.dims(probe_out);
    let weights = random_vec(&mut rng, or * oc);

    // autodiff gradient
    let mut tape = Tape::new();
    let leaf = tape.leaf_vec(rows, cols, x.clone(), true).unwrap();
    let out = build(&mut tape, leaf);
    let w = tape.leaf_vec(or, oc, weights.clone(), false).unwrap();
    let prod = tape.mul_elem(out, w).unwrap();
    let loss = tape.sum_all(prod);
    tape.backward(loss).unwrap();
    let got = tape.grad(leaf).unwrap().to_vec();

    let f = |vals: &[f64]| scalar(vals, &weights);
    let want = finite_diff_grad(&f, &x, OP_H);
    let err = max_rel_err(&got, &want);
    assert!(err < OP_TOL, "{name}: rel err {err}");
}

#[test]
fn matmul_gradients_both_sides() {
    // 3x4 * 4x2 against a fixed right operand...
    let subs = Substreams::new(1);
    let mut rng = subs.stream("gradcheck");
    let b = random_mat(&mut rng, 4, 2);
    check_op("matmul-lhs", 2, 3, 4, move |t, x| {
        let bid = t.leaf(&b, false);
        t.matmul(x, bid).unwrap()
    });
    // ...and the left operand as the variable
    let a = random_mat(&mut rng, 3, 4);
    check_op("matmul-rhs", 3, 4, 2, move |t, x| {
        let aid = t.leaf(&a, false);
        t.matmul(aid, x).unwrap()
    });
}

#[test]
fn softmax_rows_jacobian() {
    check_op("softmax_rows", 4, 4, 5, |t, x| t.softmax_rows(x).unwrap());
}

#[test]
fn layer_norm_gradients() {
    let subs = Substreams::new(5);
    let mut rng = subs.stream("gradcheck");
    let gain = random_mat(&mut rng, 1, 7);
    let bias = random_mat(&mut rng, 1, 7);
    let (g2, b2) = (gain.clone(), bias.clone());
    check_op("layer_norm-x", 6, 5, 7, move |t, x| {
        let g = t.leaf(&gain, false);
        let b = t.leaf(&bias, false);
        t.layer_norm(x, g, b, 1e-5).unwrap()
    });
    // gain and bias as the differentiated inputs
    let x = random_mat(&mut rng, 5, 7);
    let x2 = x.clone();
    check_op("layer_norm-gain", 7, 1, 7, move |t, gv| {
        let xid = t.leaf(&x, false);
        let b = t.leaf(&b2, false);
        t.layer_norm(xid, gv, b, 1e-5).unwrap()
    });
    check_op("layer_norm-bias", 8, 1, 7, move |t, bv| {
        let xid = t.leaf(&x2, false);
        let g = t.leaf(&g2, false);
        t.layer_norm(xid, g, bv, 1e-5).unwrap()
    });
}

#[test]
fn gelu_gradients_both_forms() {
    check_op("gelu-exact", 9, 5, 7, |t, x| t.gelu(x, GeluKind::Exact));
    check_op("gelu-tanh", 10, 5, 7, |t, x| t.gelu(x, GeluKind::TanhApprox));
}

#[test]
fn cross_entropy_gradient() {
    check_op("cross_entropy", 11, 5, 7, |t, x| {
        t.cross_entropy(x, &[3, 0, 6, 2, 2]).unwrap()
    });
}

#[test]
fn elementwise_and_shape_op_gradients() {
    check_op("add", 12, 5, 7, |t, x| {
        let y = t.scale(x, 0.5);
        t.add(x, y).unwrap()
    });
    check_op("sub", 13, 5, 7, |t, x| {
        let y = t.scale(x, -1.5);
        t.sub(x, y).unwrap()
    });
    check_op("mul_elem", 14, 5, 7, |t, x| {
        let y = t.scale(x, 2.0);
        t.mul_elem(x, y).unwrap()
    });
    check_op("scale", 15, 5, 7, |t, x| t.scale(x, -2.5));
    check_op("transpose", 16, 5, 7, |t, x| t.transpose(x));
    check_op("mean_all", 17, 5, 7, |t, x| t.mean_all(x));
    check_op("sum_all", 18, 5, 7, |t, x| t.sum_all(x));
    check_op("concat_rows", 19, 5, 7, |t, x| {
        let y = t.scale(x, 3.0);
        t.concat_rows(&[x, y]).unwrap()
    });
    check_op("concat_cols", 20, 5, 7, |t, x| {
        let y = t.scale(x, -0.5);
        t.concat_cols(&[x, y]).unwrap()
    });
    check_op("slice_rows", 21, 5, 7, |t, x| t.slice_rows(x, 1, 3).unwrap());
    check_op("gather_rows", 22, 5, 7, |t, x| t.gather_rows(x, &[4, 0, 2]).unwrap());
    check_op("row_sq_norm", 23, 5, 7, |t, x| t.row_sq_norm(x));
    check_op("add_row", 24, 5, 7, |t, x| {
        let row = t.slice_rows(x, 0, 1).unwrap();
        t.add_row(x, row).unwrap()
    });
    check_op("add_tiled", 25, 6, 7, |t, x| {
        let tile = t.slice_rows(x, 0, 2).unwrap();
        t.add_tiled(x, tile).unwrap()
    });
    check_op("prepend_row_per_block", 26, 6, 7, |t, x| {
        let row = t.slice_rows(x, 0, 1).unwrap();
        t.prepend_row_per_block(x, row, 3).unwrap()
    });
}

#[test]
fn sqrt_and_ln_gradients_on_positive_input() {
    // strictly positive inputs keep both ops smooth
    let subs = Substreams::new(27);
    let mut rng = subs.stream("gradcheck");
    let shift: Vec<f64> = random_vec(&mut rng, 35).iter().map(|v| v.abs() + 1.0).collect();
    let base = Mat::from_vec(5, 7, shift).unwrap();
    let b1 = base.clone();
    check_op("sqrt_elem", 28, 5, 7, move |t, x| {
        let sq = t.mul_elem(x, x).unwrap();
        let pos = t.leaf(&b1, false);
        let shifted = t.add(sq, pos).unwrap();
        t.sqrt_elem(shifted)
    });
    check_op("ln_elem", 29, 5, 7, move |t, x| {
        let sq = t.mul_elem(x, x).unwrap();
        let pos = t.leaf(&base, false);
        let shifted = t.add(sq, pos).unwrap();
        t.ln_elem(shifted)
    });
}

fn small_model(seed: u64) -> ViTParams {
    let cfg = ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 16,
        heads: 2,
        depth: 2,
        mlp_ratio: 2,
        num_classes: 4,
        gelu: GeluKind::Exact,
    };
    let subs = Substreams::new(seed);
    ViTParams::init(cfg, &mut subs.stream("model-init")).unwrap()
}

/// Every parameter of the full model loss against finite differences.
#[test]
fn full_model_loss_gradients() {
    let params = small_model(30);
    let subs = Substreams::new(31);
    let mut rng = subs.stream("gradcheck");
    let images: Vec<Vec<f64>> =
        (0..3).map(|_| random_image(&mut rng, params.cfg.pixel_count())).collect();
    let refs: Vec<&[f64]> = images.iter().map(|v| v.as_slice()).collect();
    let labels = [1usize, 3, 0];

    let mut tape = Tape::new();
    let opts = vit::ForwardOptions { trainable: true, ..Default::default() };
    let fwd = vit::batch_forward(&mut tape, &params, &refs, &opts).unwrap();
    let loss = tape.cross_entropy(fwd.logits, &labels).unwrap();
    tape.backward(loss).unwrap();

    let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
    for (pos, _) in params.tensors().iter().enumerate() {
        let id = fwd.bound.ids()[pos];
        let got = tape.grad(id).unwrap().to_vec();
        let base = params.tensors()[pos].1.clone();
        let f = |vals: &[f64]| -> f64 {
            let mut tweaked = params.clone();
            {
                let mut tensors = tweaked.tensors_mut();
                let target = tensors[pos].1.as_mut_slice();
                target.copy_from_slice(vals);
            }
            let mut t = Tape::new();
            let fw = vit::batch_forward(&mut t, &tweaked, &refs, &Default::default()).unwrap();
            let l = t.cross_entropy(fw.logits, &labels).unwrap();
            t.item(l)
        };
        let want = finite_diff_grad(&f, base.as_slice(), 1e-4);
        let err = max_rel_err(&got, &want);
        assert!(err < 1e-3, "{}: rel err {err}", names[pos]);
    }
}

/// Gradient of the cls-norm with respect to the input tokens.
#[test]
fn encoder_input_gradient() {
    let params = small_model(32);
    let cfg = params.cfg;
    let subs = Substreams::new(33);
    let mut rng = subs.stream("gradcheck");
    let tokens = random_mat(&mut rng, cfg.n_patches(), cfg.embed_dim);

    let loss_of = |vals: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let bound = vit::bind(&mut tape, &params, false);
        let t = tape
            .leaf_vec(cfg.n_patches(), cfg.embed_dim, vals.to_vec(), false)
            .unwrap();
        let cls = vit::cls_states_from_tokens(&mut tape, &bound, &cfg, t, 1, None).unwrap();
        let sq = tape.row_sq_norm(cls);
        let loss = tape.sum_all(sq);
        tape.item(loss)
    };

    let mut tape = Tape::new();
    let bound = vit::bind(&mut tape, &params, false);
    let t = tape.leaf(&tokens, true);
    let cls = vit::cls_states_from_tokens(&mut tape, &bound, &cfg, t, 1, None).unwrap();
    let sq = tape.row_sq_norm(cls);
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    let got = tape.grad(t).unwrap().to_vec();
    let want = finite_diff_grad(&loss_of, tokens.as_slice(), 1e-4);
    let err = max_rel_err(&got, &want);
    assert!(err < 1e-3, "rel err {err}");
}

/// Gradient of the regularized noise objective with respect to the noise.
#[test]
fn regularized_noise_loss_gradient() {
    let params = small_model(34);
    let subs = Substreams::new(35);
    let mut rng = subs.stream("gradcheck");
    let images: Vec<Vec<f64>> =
        (0..2).map(|_| random_image(&mut rng, params.cfg.pixel_count())).collect();
    let refs: Vec<&[f64]> = images.iter().map(|v| v.as_slice()).collect();
    let mut data = LabeledImages::new(3, 8, 8);
    for im in &images {
        data.push(im.clone(), 0).unwrap();
    }
    let v = random_mat(&mut rng, params.cfg.n_patches(), params.cfg.embed_dim);
    let lambda = 0.1;

    let (_, got) =
        nsvit_core::noise::loss_regularized_with_grad(&params, &refs, &v, lambda).unwrap();
    let f = |vals: &[f64]| -> f64 {
        let vm = Mat::from_vec(v.rows(), v.cols(), vals.to_vec()).unwrap();
        nsvit_core::noise::loss_regularized(&params, &refs, &vm, lambda).unwrap()
    };
    let want = finite_diff_grad(&f, v.as_slice(), 1e-5);
    let err = max_rel_err(got.as_slice(), &want);
    assert!(err < 1e-3, "rel err {err}");
}
