//! Exact input-level nullspace of the patch embedding layer.
//!
//! The patch embedding maps each flattened patch `u` (length `p^2 c`) to
//! `u W_e + b`; differences of embeddings cancel the bias, so any pixel
//! perturbation whose per-patch flattening lies in the left nullspace of
//! `W_e` leaves every token — and therefore the whole model — unchanged.
//! With the toy configuration `p^2 c = 192 > d = 64` that nullspace has
//! dimension 128.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::linalg::{self, NullspaceBasis};
use crate::mat::{l2_norm, Mat};
use crate::rng::normal;
use crate::tensor::softmax_row;
use crate::vit::{self, ModelConfig, ViTParams};

/// How per-patch nullspace coefficients are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchNoiseMode {
    /// Independent coefficients for every patch.
    PerPatch,
    /// One coefficient row shared by all patches (visually periodic noise).
    Tiled,
}

/// Pixel-space noise rendered from nullspace coefficients.
#[derive(Debug, Clone)]
pub struct PatchNoise {
    /// `n_patches x nullspace_dim` coefficients.
    pub per_patch_coeffs: Mat,
    /// Image-shaped rendering of the coefficients.
    pub rendered: Vec<f64>,
    /// L2 norm of the rendered noise.
    pub norm: f64,
}

/// Nullspace of `v -> v W_e` for the model's patch embedding.
///
/// Returns an empty basis (with a warning) when `p^2 c <= d` and `W_e`
/// has full row rank, since then only the zero vector qualifies.
pub fn compute_patch_nullspace(params: &ViTParams) -> Result<NullspaceBasis> {
    let basis = linalg::nullspace(&params.patch_weight, linalg::DEFAULT_TOL)?;
    if basis.is_empty() {
        log::warn!(
            "patch embedding {}x{} has a trivial nullspace; \
             need patch dim > embed dim for nontrivial noise",
            params.patch_weight.rows(),
            params.patch_weight.cols()
        );
    }
    Ok(basis)
}

/// Draws Gaussian coefficients in the nullspace basis, renders them to
/// image layout and rescales to the requested L2 norm. `scale == 0`
/// yields exact zero noise.
pub fn sample_patch_noise(
    cfg: &ModelConfig,
    basis: &NullspaceBasis,
    scale: f64,
    mode: PatchNoiseMode,
    rng: &mut ChaCha8Rng,
) -> Result<PatchNoise> {
    if basis.is_empty() {
        return Err(Error::Usage(alloc::string::String::from(
            "cannot sample from an empty nullspace basis",
        )));
    }
    if basis.vectors.cols() != cfg.patch_dim() {
        return Err(Error::ShapeMismatch {
            op: "sample_patch_noise",
            lhs: (basis.dim(), cfg.patch_dim()),
            rhs: basis.vectors.dims(),
        });
    }
    let n = cfg.n_patches();
    let dim = basis.dim();
    let mut coeffs = Mat::zeros(n, dim);
    match mode {
        PatchNoiseMode::PerPatch => {
            for i in 0..n {
                for j in 0..dim {
                    coeffs.set(i, j, normal(rng));
                }
            }
        }
        PatchNoiseMode::Tiled => {
            let row: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
            for i in 0..n {
                coeffs.row_mut(i).copy_from_slice(&row);
            }
        }
    }
    let patch_rows = coeffs.matmul(&basis.vectors)?;
    let mut rendered = vit::unpatchify(cfg, &patch_rows)?;
    let raw_norm = l2_norm(&rendered);
    if scale == 0.0 || raw_norm == 0.0 {
        return Ok(PatchNoise {
            per_patch_coeffs: Mat::zeros(n, dim),
            rendered: vec![0.0; rendered.len()],
            norm: 0.0,
        });
    }
    let factor = scale / raw_norm;
    for v in rendered.iter_mut() {
        *v *= factor;
    }
    let coeffs = coeffs.scale(factor);
    let norm = l2_norm(&rendered);
    Ok(PatchNoise { per_patch_coeffs: coeffs, rendered, norm })
}

/// Adds pixel noise to an image. Clipping to `[0, 1]` is optional because
/// it breaks the exact invariance; leave it off to test the mathematical
/// claim, turn it on to stay in valid image range.
pub fn apply_noise(image: &[f64], noise: &[f64], clip: bool) -> Vec<f64> {
    image
        .iter()
        .zip(noise)
        .map(|(&u, &v)| if clip { (u + v).clamp(0.0, 1.0) } else { u + v })
        .collect()
}

/// Logit-level effect of a fixed pixel noise over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvarianceReport {
    /// Largest absolute logit deviation over all images and classes.
    pub max_logit_dev: f64,
    /// Fraction of images whose argmax class is unchanged.
    pub match_rate: f64,
    /// Mean squared distance between output probability vectors.
    pub mse_prob: f64,
}

/// Compares logits with and without `noise` added to every image.
pub fn verify_model_invariance(
    params: &ViTParams,
    data: &LabeledImages,
    noise: &[f64],
) -> Result<InvarianceReport> {
    if data.is_empty() {
        return Err(Error::EmptyMatrix { op: "verify_model_invariance" });
    }
    if noise.len() != data.pixel_count() {
        return Err(Error::Usage(alloc::format!(
            "noise has {} values, expected {}",
            noise.len(),
            data.pixel_count()
        )));
    }
    let mut max_dev = 0.0f64;
    let mut matches = 0usize;
    let mut mse_sum = 0.0f64;
    let classes = params.cfg.num_classes;
    let mut p_clean = vec![0.0; classes];
    let mut p_noised = vec![0.0; classes];

    for chunk in vit::chunked_indices(data.len(), 32) {
        let clean_refs: Vec<&[f64]> = chunk.iter().map(|&i| data.images[i].as_slice()).collect();
        let noised: Vec<Vec<f64>> =
            chunk.iter().map(|&i| apply_noise(&data.images[i], noise, false)).collect();
        let noised_refs: Vec<&[f64]> = noised.iter().map(|v| v.as_slice()).collect();
        let z = vit::batch_logits(params, &clean_refs, None)?;
        let z2 = vit::batch_logits(params, &noised_refs, None)?;
        for pos in 0..chunk.len() {
            let zr = z.row(pos);
            let z2r = z2.row(pos);
            for (a, b) in zr.iter().zip(z2r) {
                max_dev = max_dev.max((a - b).abs());
            }
            if vit::argmax(zr) == vit::argmax(z2r) {
                matches += 1;
            }
            softmax_row(zr, &mut p_clean);
            softmax_row(z2r, &mut p_noised);
            mse_sum += p_clean
                .iter()
                .zip(&p_noised)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    Ok(InvarianceReport {
        max_logit_dev: max_dev,
        match_rate: matches as f64 / data.len() as f64,
        mse_prob: mse_sum / data.len() as f64,
    })
}
