//! Shared oracles: central finite differences and error measures.

use nsvit_core::Mat;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Central finite-difference gradient of a scalar function.
pub fn finite_diff_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Worst relative error between two gradients, with an absolute floor so
/// near-zero entries compare absolutely.
pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(&g, &w)| {
            let scale = g.abs().max(w.abs()).max(1e-6);
            (g - w).abs() / scale
        })
        .fold(0.0, f64::max)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| nsvit_core::rng::normal(rng)).collect()
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, random_vec(rng, rows * cols)).unwrap()
}

/// Random image with pixels in [0, 1].
pub fn random_image(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen::<f64>()).collect()
}
