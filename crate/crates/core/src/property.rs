//! Empirical characterization of the approximate nullspace (scalar
//! scaling, convex combinations of learned noises) and desk-scale
//! robustness probes (FGSM, Gaussian corruption).

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::noise::{self, NoiseVector};
use crate::rng::normal;
use crate::tensor::Tape;
use crate::vit::{self, ViTParams};

/// Mean probability-space influence of convex noise combinations on an
/// `alpha_1 x alpha_2` grid.
#[derive(Debug, Clone)]
pub struct PropertyGrid {
    /// Grid coordinates along both axes.
    pub alphas: Vec<f64>,
    /// `cells.at(i, j)` is the mean mse_prob of
    /// `alphas[i] * v_first + alphas[j] * v_second` over all pairs.
    pub cells: Mat,
    /// Number of noise vectors in the source set.
    pub m: usize,
    /// Number of sampled pairs.
    pub n_pairs: usize,
}

/// Mean influence of `alpha * v` over the noise set, one value per alpha.
pub fn scaling_sweep(
    params: &ViTParams,
    data: &LabeledImages,
    noises: &[NoiseVector],
    alphas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if noises.is_empty() {
        return Err(Error::EmptyMatrix { op: "scaling_sweep" });
    }
    let clean = noise::clean_eval(params, data)?;
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut total = 0.0;
        for v in noises {
            if alpha == 0.0 {
                continue;
            }
            let scaled = v.values.scale(alpha);
            total += noise::evaluate_noise_cached(params, &clean, &scaled)?.mse_prob;
        }
        out.push((alpha, total / noises.len() as f64));
    }
    Ok(out)
}

/// Evaluates `alpha_1 v_a + alpha_2 v_b` over a grid for sampled pairs.
pub fn convex_grid(
    params: &ViTParams,
    data: &LabeledImages,
    noises: &[NoiseVector],
    pairs: &[(usize, usize)],
    grid_step: f64,
) -> Result<PropertyGrid> {
    if pairs.is_empty() {
        return Err(Error::EmptyMatrix { op: "convex_grid" });
    }
    if grid_step <= 0.0 || grid_step > 1.0 {
        return Err(Error::Usage(alloc::format!("grid_step must be in (0, 1], got {grid_step}")));
    }
    for &(a, b) in pairs {
        if a >= noises.len() || b >= noises.len() {
            return Err(Error::Usage(alloc::format!(
                "pair ({a}, {b}) out of range for {} noises",
                noises.len()
            )));
        }
    }
    let steps = libm::round(1.0 / grid_step) as usize;
    let alphas: Vec<f64> = (0..=steps).map(|i| i as f64 * grid_step).collect();
    let clean = noise::clean_eval(params, data)?;
    let mut cells = Mat::zeros(alphas.len(), alphas.len());
    for (i, &a1) in alphas.iter().enumerate() {
        for (j, &a2) in alphas.iter().enumerate() {
            if a1 == 0.0 && a2 == 0.0 {
                continue;
            }
            let mut total = 0.0;
            for &(pa, pb) in pairs {
                let combo = noises[pa].values.scale(a1).add(&noises[pb].values.scale(a2))?;
                total += noise::evaluate_noise_cached(params, &clean, &combo)?.mse_prob;
            }
            cells.set(i, j, total / pairs.len() as f64);
        }
    }
    Ok(PropertyGrid { alphas, cells, m: noises.len(), n_pairs: pairs.len() })
}

/// Learns `m` noises at a common threshold from different initializations;
/// the building block for the property sweeps.
pub fn learn_noise_set(
    params: &ViTParams,
    data: &LabeledImages,
    cfg: &noise::EpsNoiseConfig,
    m: usize,
    subs: &crate::rng::Substreams,
) -> Result<Vec<NoiseVector>> {
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let mut rng = subs.stream_indexed("property-noise", i as u64);
        let outcome = noise::learn_eps_noise(params, data, cfg, &mut rng)?;
        if !outcome.converged {
            log::warn!("property noise {i} did not converge (delta {:.4})", outcome.delta);
        }
        out.push(outcome.noise);
    }
    Ok(out)
}

// ── Input-gradient probes ───────────────────────────────────────────

/// Pixel-space gradient of the cross-entropy loss at one image.
pub fn input_gradient(params: &ViTParams, image: &[f64], label: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let opts = vit::ForwardOptions { patches_require_grad: true, ..Default::default() };
    let fwd = vit::batch_forward(&mut tape, params, &[image], &opts)?;
    let loss = tape.cross_entropy(fwd.logits, &[label])?;
    tape.backward(loss)?;
    let g = tape.grad(fwd.patches).expect("patches require grad");
    let (r, c) = tape.dims(fwd.patches);
    // patchify is a pixel permutation, so the image gradient is the
    // inverse scatter of the patch-matrix gradient
    vit::unpatchify(&params.cfg, &Mat::from_vec(r, c, g.to_vec())?)
}

/// Single-step sign-gradient attack, pixels clipped to `[0, 1]`.
pub fn fgsm_attack(
    params: &ViTParams,
    image: &[f64],
    label: usize,
    eps_pix: f64,
) -> Result<Vec<f64>> {
    if eps_pix < 0.0 {
        return Err(Error::Usage(alloc::format!("eps_pix must be >= 0, got {eps_pix}")));
    }
    let grad = input_gradient(params, image, label)?;
    Ok(image
        .iter()
        .zip(&grad)
        .map(|(&u, &g)| {
            let sign = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            (u + eps_pix * sign).clamp(0.0, 1.0)
        })
        .collect())
}

/// Accuracy under the FGSM attack at the given pixel budget.
pub fn fgsm_accuracy(params: &ViTParams, data: &LabeledImages, eps_pix: f64) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (image, &label) in data.images.iter().zip(&data.labels) {
        let adv = fgsm_attack(params, image, label, eps_pix)?;
        if vit::predict(params, &adv)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy under additive Gaussian pixel noise (clipped to `[0, 1]`),
/// the simple corruption probe.
pub fn gaussian_corruption_accuracy(
    params: &ViTParams,
    data: &LabeledImages,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in vit::chunked_indices(data.len(), 32) {
        let corrupted: Vec<Vec<f64>> = chunk
            .iter()
            .map(|&i| {
                data.images[i]
                    .iter()
                    .map(|&u| (u + sigma * normal(rng)).clamp(0.0, 1.0))
                    .collect()
            })
            .collect();
        let refs: Vec<&[f64]> = corrupted.iter().map(|v| v.as_slice()).collect();
        let z = vit::batch_logits(params, &refs, None)?;
        for (pos, &i) in chunk.iter().enumerate() {
            if vit::argmax(z.row(pos)) == data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_dataset, SyntheticConfig};
    use alloc::vec;
    use crate::noise::Provenance;
    use crate::rng::Substreams;
    use crate::tensor::GeluKind;
    use crate::vit::ModelConfig;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            embed_dim: 16,
            heads: 2,
            depth: 2,
            mlp_ratio: 2,
            num_classes: 4,
            gelu: GeluKind::Exact,
        }
    }

    fn fixture(seed: u64) -> (ViTParams, LabeledImages) {
        let subs = Substreams::new(seed);
        let params = ViTParams::init(small_cfg(), &mut subs.stream("model-init")).unwrap();
        let data = synthetic_dataset(
            &SyntheticConfig {
                channels: 3,
                image_size: 8,
                num_classes: 4,
                samples_per_class: 4,
                pixel_noise: 0.1,
            },
            &mut subs.stream("data"),
        );
        (params, data)
    }

    fn random_noise(seed: u64, scale: f64) -> NoiseVector {
        let subs = Substreams::new(seed);
        let mut rng = subs.stream("noise-init");
        let mut v = Mat::zeros(4, 16);
        for x in v.as_mut_slice().iter_mut() {
            *x = scale * normal(&mut rng);
        }
        NoiseVector::new(v, Provenance::Random)
    }

    #[test]
    fn sweep_is_zero_at_alpha_zero() {
        let (params, data) = fixture(1);
        let noises = vec![random_noise(2, 0.5), random_noise(3, 0.5)];
        let curve = scaling_sweep(&params, &data, &noises, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(curve[0], (0.0, 0.0));
        assert!(curve[1].1 > 0.0);
        // influence grows with alpha for small noise
        assert!(curve[2].1 > curve[1].1);
    }

    #[test]
    fn grid_origin_is_zero_and_edges_match_single_noise() {
        let (params, data) = fixture(4);
        let noises = vec![random_noise(5, 0.3), random_noise(6, 0.3)];
        let grid = convex_grid(&params, &data, &noises, &[(0, 1)], 0.5).unwrap();
        assert_eq!(grid.alphas, vec![0.0, 0.5, 1.0]);
        assert_eq!(grid.cells.at(0, 0), 0.0);
        // (1, 0) is v_first alone
        let clean = noise::clean_eval(&params, &data).unwrap();
        let solo =
            noise::evaluate_noise_cached(&params, &clean, &noises[0].values).unwrap().mse_prob;
        assert!((grid.cells.at(2, 0) - solo).abs() < 1e-12);
    }

    #[test]
    fn grid_symmetric_with_both_orderings() {
        let (params, data) = fixture(7);
        let noises = vec![random_noise(8, 0.3), random_noise(9, 0.3)];
        let grid =
            convex_grid(&params, &data, &noises, &[(0, 1), (1, 0)], 0.5).unwrap();
        for i in 0..grid.alphas.len() {
            for j in 0..grid.alphas.len() {
                assert!((grid.cells.at(i, j) - grid.cells.at(j, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fgsm_zero_budget_is_clean_accuracy() {
        let (params, data) = fixture(10);
        let clean = vit::accuracy(&params, &data).unwrap();
        let attacked = fgsm_accuracy(&params, &data, 0.0).unwrap();
        assert_eq!(clean, attacked);
    }

    #[test]
    fn fgsm_stays_in_pixel_range() {
        let (params, data) = fixture(11);
        let adv = fgsm_attack(&params, &data.images[0], data.labels[0], 0.3).unwrap();
        assert!(adv.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn input_gradient_matches_finite_differences_on_pixels() {
        let (params, data) = fixture(12);
        let image = &data.images[0];
        let label = data.labels[0];
        let grad = input_gradient(&params, image, label).unwrap();
        let loss_at = |img: &[f64]| {
            let mut tape = Tape::new();
            let fwd =
                vit::batch_forward(&mut tape, &params, &[img], &Default::default()).unwrap();
            let l = tape.cross_entropy(fwd.logits, &[label]).unwrap();
            tape.item(l)
        };
        let h = 1e-5;
        for &pix in &[0usize, 37, 151] {
            let mut up = image.clone();
            up[pix] += h;
            let mut down = image.clone();
            down[pix] -= h;
            let fd = (loss_at(&up) - loss_at(&down)) / (2.0 * h);
            let rel = (fd - grad[pix]).abs() / fd.abs().max(grad[pix].abs()).max(1e-12);
            assert!(rel < 1e-4, "pixel {pix}: fd {fd} vs grad {}", grad[pix]);
        }
    }
}
