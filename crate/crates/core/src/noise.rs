//! Gradient-based synthesis of approximate encoder-level nullspace noise.
//!
//! The noise lives in token-embedding space with shape `n_patches x d` and
//! is added to the patch-embedding output of every sample (the cls token
//! receives none). Two objectives are implemented:
//!
//! * the exploratory regularized loss
//!   `E ||f(u + v) - f(u)||_2 - lambda * log ||v||`, minimized with plain
//!   gradient descent, which trades noise magnitude against output drift;
//! * the thresholded inner loop used by fine-tuning: descend the squared
//!   logit gap `mean ||z' - z||^2` until the probability-space influence
//!   `delta = mean ||softmax(z') - softmax(z)||^2` on a fresh minibatch
//!   drops below `epsilon`.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::{BatchSampler, LabeledImages};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::rng::uniform_sym;
use crate::tensor::{softmax_row, Tape};
use crate::vit::{self, ViTParams};

/// Where a noise tensor came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Learned,
    Random,
    Permuted,
    Constructed,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Learned => "learned",
            Provenance::Random => "random",
            Provenance::Permuted => "permuted",
            Provenance::Constructed => "constructed",
        }
    }
}

/// Token-embedding-space noise, broadcast over samples when applied.
#[derive(Debug, Clone)]
pub struct NoiseVector {
    /// `n_patches x d` values.
    pub values: Mat,
    /// L2 norm of `values`.
    pub norm: f64,
    pub provenance: Provenance,
}

impl NoiseVector {
    pub fn new(values: Mat, provenance: Provenance) -> Self {
        let norm = values.frob_norm();
        NoiseVector { values, norm, provenance }
    }

    pub fn scaled(&self, alpha: f64) -> NoiseVector {
        NoiseVector::new(self.values.scale(alpha), self.provenance)
    }
}

/// Influence of a noise on the model output over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseMetrics {
    /// Fraction of samples whose argmax class is unchanged.
    pub match_rate: f64,
    /// Mean squared distance between output probability vectors; at most 2.
    pub mse_prob: f64,
    /// Mean squared distance between logits.
    pub mse_logit: f64,
}

// ── Clean-output cache ──────────────────────────────────────────────

/// Patch tokens and clean outputs of a frozen model over a dataset.
/// Valid only until the parameters change.
pub struct CleanEval {
    /// Per-image patch embedding output, `n_patches x d`.
    pub tokens: Vec<Mat>,
    /// Clean logits, one row per image.
    pub logits: Mat,
    /// Row-softmax of `logits`.
    pub probs: Mat,
    pub preds: Vec<usize>,
}

const EVAL_CHUNK: usize = 32;

pub fn clean_eval(params: &ViTParams, data: &LabeledImages) -> Result<CleanEval> {
    if data.is_empty() {
        return Err(Error::EmptyMatrix { op: "clean_eval" });
    }
    let classes = params.cfg.num_classes;
    let mut tokens = Vec::with_capacity(data.len());
    for image in &data.images {
        tokens.push(vit::patch_embed(params, image)?);
    }
    let mut logits = Mat::zeros(data.len(), classes);
    for chunk in vit::chunked_indices(data.len(), EVAL_CHUNK) {
        let stack: Vec<&Mat> = chunk.iter().map(|&i| &tokens[i]).collect();
        let stack = Mat::vstack(&stack)?;
        let z = vit::logits_from_token_stack(params, &stack, chunk.len(), None)?;
        for (pos, &i) in chunk.iter().enumerate() {
            logits.row_mut(i).copy_from_slice(z.row(pos));
        }
    }
    let mut probs = Mat::zeros(data.len(), classes);
    let mut preds = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        softmax_row(logits.row(i), probs.row_mut(i));
        preds.push(vit::argmax(logits.row(i)));
    }
    Ok(CleanEval { tokens, logits, probs, preds })
}

impl CleanEval {
    fn token_stack(&self, indices: &[usize]) -> Result<Mat> {
        let parts: Vec<&Mat> = indices.iter().map(|&i| &self.tokens[i]).collect();
        Mat::vstack(&parts)
    }
}

/// Noised logits for a set of cached images.
fn noised_logits(
    params: &ViTParams,
    clean: &CleanEval,
    indices: &[usize],
    noise: &Mat,
) -> Result<Mat> {
    let stack = clean.token_stack(indices)?;
    vit::logits_from_token_stack(params, &stack, indices.len(), Some(noise))
}

/// Evaluates all three metrics against a prebuilt clean cache.
pub fn evaluate_noise_cached(
    params: &ViTParams,
    clean: &CleanEval,
    noise: &Mat,
) -> Result<NoiseMetrics> {
    let n = clean.tokens.len();
    let classes = params.cfg.num_classes;
    let mut matches = 0usize;
    let mut msep = 0.0;
    let mut msel = 0.0;
    let mut p = vec![0.0; classes];
    for chunk in vit::chunked_indices(n, EVAL_CHUNK) {
        let z2 = noised_logits(params, clean, &chunk, noise)?;
        for (pos, &i) in chunk.iter().enumerate() {
            let zn = z2.row(pos);
            if vit::argmax(zn) == clean.preds[i] {
                matches += 1;
            }
            softmax_row(zn, &mut p);
            msep += p
                .iter()
                .zip(clean.probs.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            msel += zn
                .iter()
                .zip(clean.logits.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    Ok(NoiseMetrics {
        match_rate: matches as f64 / n as f64,
        mse_prob: msep / n as f64,
        mse_logit: msel / n as f64,
    })
}

/// Evaluates the noise over a dataset without any shared cache.
pub fn evaluate_noise(
    params: &ViTParams,
    data: &LabeledImages,
    noise: &NoiseVector,
) -> Result<NoiseMetrics> {
    let clean = clean_eval(params, data)?;
    evaluate_noise_cached(params, &clean, &noise.values)
}

// ── Regularized exploratory objective ───────────────────────────────

/// `mean_batch ||f(u + v) - f(u)||_2 - lambda * log ||v||`.
pub fn loss_regularized(
    params: &ViTParams,
    batch: &[&[f64]],
    noise: &Mat,
    lambda: f64,
) -> Result<f64> {
    Ok(regularized_graph(params, batch, noise, lambda, false)?.0)
}

/// Same loss plus its gradient with respect to the noise.
pub fn loss_regularized_with_grad(
    params: &ViTParams,
    batch: &[&[f64]],
    noise: &Mat,
    lambda: f64,
) -> Result<(f64, Mat)> {
    let (loss, grad) = regularized_graph(params, batch, noise, lambda, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn regularized_graph(
    params: &ViTParams,
    batch: &[&[f64]],
    noise: &Mat,
    lambda: f64,
    want_grad: bool,
) -> Result<(f64, Option<Mat>)> {
    if lambda < 0.0 {
        return Err(Error::Usage(alloc::format!("lambda must be >= 0, got {lambda}")));
    }
    if lambda > 0.0 && noise.frob_norm() == 0.0 {
        return Err(Error::NonFinite { op: "loss_regularized (log of zero norm)" });
    }
    let clean = vit::batch_logits(params, batch, None)?;

    let mut tape = Tape::new();
    let opts = vit::ForwardOptions { noise: Some((noise, want_grad)), ..Default::default() };
    let fwd = vit::batch_forward(&mut tape, params, batch, &opts)?;
    let z_clean = tape.leaf(&clean, false);
    let diff = tape.sub(fwd.logits, z_clean)?;
    let sq = tape.row_sq_norm(diff);
    let dist = tape.sqrt_elem(sq);
    let invariance = tape.mean_all(dist);
    let loss = if lambda > 0.0 {
        let v = fwd.noise.expect("noise leaf exists");
        let vsq = tape.mul_elem(v, v)?;
        let total = tape.sum_all(vsq);
        let norm = tape.sqrt_elem(total);
        let log_norm = tape.ln_elem(norm);
        let reg = tape.scale(log_norm, lambda);
        tape.sub(invariance, reg)?
    } else {
        invariance
    };
    let loss_val = tape.item(loss);
    if !want_grad {
        return Ok((loss_val, None));
    }
    tape.backward(loss)?;
    let v = fwd.noise.expect("noise leaf exists");
    let g = tape.grad(v).expect("noise requires grad");
    let (r, c) = tape.dims(v);
    Ok((loss_val, Some(Mat::from_vec(r, c, g.to_vec())?)))
}

/// One point of a noise-optimization trace.
#[derive(Debug, Clone, Copy)]
pub struct NoiseTracePoint {
    pub step: usize,
    pub loss: f64,
    /// Minibatch mean squared probability distance.
    pub mse_prob: f64,
    /// Minibatch match rate.
    pub match_rate: f64,
    pub norm: f64,
}

/// Minimizes the regularized objective with plain gradient descent from a
/// uniform initialization. Larger `lambda` buys larger final noise norms.
#[allow(clippy::too_many_arguments)]
pub fn learn_noise_regularized(
    params: &ViTParams,
    data: &LabeledImages,
    lambda: f64,
    lr: f64,
    steps: usize,
    batch: usize,
    init_limit: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(NoiseVector, Vec<NoiseTracePoint>)> {
    let cfg = &params.cfg;
    let mut v = Mat::zeros(cfg.n_patches(), cfg.embed_dim);
    for val in v.as_mut_slice().iter_mut() {
        *val = uniform_sym(rng, init_limit);
    }
    let clean = clean_eval(params, data)?;
    let mut sampler = BatchSampler::new(data.len(), batch, rng.clone());
    let mut trace = Vec::with_capacity(steps);

    for step in 0..steps {
        let idx = sampler.next_batch();
        let (loss, grad, stats) = regularized_step(params, &clean, &idx, &v, lambda)?;
        if !loss.is_finite() {
            return Err(Error::NoiseDiverged { step });
        }
        trace.push(NoiseTracePoint {
            step,
            loss,
            mse_prob: stats.0,
            match_rate: stats.1,
            norm: v.frob_norm(),
        });
        for (p, g) in v.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *p -= lr * g;
        }
    }
    Ok((NoiseVector::new(v, Provenance::Learned), trace))
}

/// Regularized loss + gradient against cached clean logits, with
/// minibatch (mse_prob, match_rate) as a byproduct.
fn regularized_step(
    params: &ViTParams,
    clean: &CleanEval,
    indices: &[usize],
    noise: &Mat,
    lambda: f64,
) -> Result<(f64, Mat, (f64, f64))> {
    if lambda > 0.0 && noise.frob_norm() == 0.0 {
        return Err(Error::NonFinite { op: "loss_regularized (log of zero norm)" });
    }
    let mut tape = Tape::new();
    let bound = vit::bind(&mut tape, params, false);
    let stack = clean.token_stack(indices)?;
    let tokens = tape.leaf(&stack, false);
    let v = tape.leaf(noise, true);
    let cls = vit::cls_states_from_tokens(&mut tape, &bound, &params.cfg, tokens, indices.len(), Some(v))?;
    let z2 = tape.matmul(cls, bound.classifier)?;

    let stats = minibatch_stats(params, clean, indices, tape.value(z2));

    let mut z_clean = Mat::zeros(indices.len(), params.cfg.num_classes);
    for (pos, &i) in indices.iter().enumerate() {
        z_clean.row_mut(pos).copy_from_slice(clean.logits.row(i));
    }
    let zc = tape.leaf(&z_clean, false);
    let diff = tape.sub(z2, zc)?;
    let sq = tape.row_sq_norm(diff);
    let dist = tape.sqrt_elem(sq);
    let invariance = tape.mean_all(dist);
    let loss = if lambda > 0.0 {
        let vsq = tape.mul_elem(v, v)?;
        let total = tape.sum_all(vsq);
        let norm = tape.sqrt_elem(total);
        let log_norm = tape.ln_elem(norm);
        let reg = tape.scale(log_norm, lambda);
        tape.sub(invariance, reg)?
    } else {
        invariance
    };
    let loss_val = tape.item(loss);
    tape.backward(loss)?;
    let g = tape.grad(v).expect("noise requires grad");
    let grad = Mat::from_vec(noise.rows(), noise.cols(), g.to_vec())?;
    Ok((loss_val, grad, stats))
}

fn minibatch_stats(
    params: &ViTParams,
    clean: &CleanEval,
    indices: &[usize],
    noised_logits: &[f64],
) -> (f64, f64) {
    let classes = params.cfg.num_classes;
    let mut p = vec![0.0; classes];
    let mut msep = 0.0;
    let mut matches = 0usize;
    for (pos, &i) in indices.iter().enumerate() {
        let zn = &noised_logits[pos * classes..(pos + 1) * classes];
        softmax_row(zn, &mut p);
        msep += p
            .iter()
            .zip(clean.probs.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        if vit::argmax(zn) == clean.preds[i] {
            matches += 1;
        }
    }
    (msep / indices.len() as f64, matches as f64 / indices.len() as f64)
}

// ── Thresholded inner loop ──────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct EpsNoiseConfig {
    /// Noise nullity threshold on the probability-space influence.
    pub eps: f64,
    /// Noise learning rate.
    pub lr: f64,
    /// Step budget; early stopping usually triggers well before it.
    pub max_steps: usize,
    /// Uniform initialization limit.
    pub limit: f64,
    pub batch: usize,
}

impl EpsNoiseConfig {
    /// Full-scale values: eps 0.03, lr 0.1, T 3000, limit 3, batch 128.
    pub fn paper() -> Self {
        EpsNoiseConfig { eps: 0.03, lr: 0.1, max_steps: 3000, limit: 3.0, batch: 128 }
    }

    /// Desk-scale: smaller step budget and batch, same thresholds.
    pub fn desk() -> Self {
        EpsNoiseConfig { max_steps: 1000, batch: 64, ..Self::paper() }
    }
}

#[derive(Debug, Clone)]
pub struct EpsNoiseOutcome {
    pub noise: NoiseVector,
    /// Minibatch influence at the returned noise.
    pub delta: f64,
    /// Steps executed before stopping.
    pub steps: usize,
    /// Whether `delta < eps` was reached within the budget.
    pub converged: bool,
    pub trace: Vec<NoiseTracePoint>,
}

/// Alg-style thresholded synthesis: sample `v ~ U(-limit, limit)`, then per
/// step draw a fresh minibatch, stop once `delta < eps`, otherwise descend
/// the squared logit gap with AdamW (cosine schedule, no weight decay).
///
/// A budget exhaustion is not an error: the outcome carries the best seen
/// noise with `converged = false` and the caller decides.
pub fn learn_eps_noise(
    params: &ViTParams,
    data: &LabeledImages,
    cfg: &EpsNoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpsNoiseOutcome> {
    if cfg.eps <= 0.0 {
        return Err(Error::Usage(alloc::format!("eps must be > 0, got {}", cfg.eps)));
    }
    let mcfg = &params.cfg;
    let mut v = Mat::zeros(mcfg.n_patches(), mcfg.embed_dim);
    for val in v.as_mut_slice().iter_mut() {
        *val = uniform_sym(rng, cfg.limit);
    }
    let clean = clean_eval(params, data)?;
    let mut sampler = BatchSampler::new(data.len(), cfg.batch, rng.clone());
    let mut opt = AdamW::new(
        AdamWConfig::new(cfg.lr, Schedule::Cosine { total_steps: cfg.max_steps })
            .with_weight_decay(0.0),
        &[v.len()],
    );
    let mut trace = Vec::new();
    let mut best_delta = f64::INFINITY;
    let mut best_v = v.clone();

    for step in 0..cfg.max_steps {
        let idx = sampler.next_batch();

        let mut tape = Tape::new();
        let bound = vit::bind(&mut tape, params, false);
        let stack = clean.token_stack(&idx)?;
        let tokens = tape.leaf(&stack, false);
        let vid = tape.leaf(&v, true);
        let cls =
            vit::cls_states_from_tokens(&mut tape, &bound, mcfg, tokens, idx.len(), Some(vid))?;
        let z2 = tape.matmul(cls, bound.classifier)?;

        let (delta, match_rate) = minibatch_stats(params, &clean, &idx, tape.value(z2));
        if delta < best_delta {
            best_delta = delta;
            best_v = v.clone();
        }
        if delta < cfg.eps {
            trace.push(NoiseTracePoint {
                step,
                loss: 0.0,
                mse_prob: delta,
                match_rate,
                norm: v.frob_norm(),
            });
            return Ok(EpsNoiseOutcome {
                noise: NoiseVector::new(v, Provenance::Learned),
                delta,
                steps: step,
                converged: true,
                trace,
            });
        }

        let mut z_clean = Mat::zeros(idx.len(), mcfg.num_classes);
        for (pos, &i) in idx.iter().enumerate() {
            z_clean.row_mut(pos).copy_from_slice(clean.logits.row(i));
        }
        let zc = tape.leaf(&z_clean, false);
        let diff = tape.sub(z2, zc)?;
        let sq = tape.row_sq_norm(diff);
        let ell = tape.mean_all(sq);
        let ell_val = tape.item(ell);
        if !ell_val.is_finite() {
            return Err(Error::NoiseDiverged { step });
        }
        trace.push(NoiseTracePoint {
            step,
            loss: ell_val,
            mse_prob: delta,
            match_rate,
            norm: v.frob_norm(),
        });
        tape.backward(ell)?;
        let grad = tape.grad(vid).expect("noise requires grad").to_vec();
        opt.step(&mut [v.as_mut_slice()], &[&grad]);
    }

    let delta = best_delta;
    Ok(EpsNoiseOutcome {
        noise: NoiseVector::new(best_v, Provenance::Learned),
        delta,
        steps: cfg.max_steps,
        converged: false,
        trace,
    })
}

/// Uniformly permutes all scalar elements of the noise, preserving the
/// norm exactly while scrambling the direction.
pub fn permute_noise(noise: &NoiseVector, rng: &mut ChaCha8Rng) -> NoiseVector {
    let (r, c) = noise.values.dims();
    let mut values = noise.values.as_slice().to_vec();
    values.shuffle(rng);
    NoiseVector::new(
        Mat::from_vec(r, c, values).expect("same length"),
        Provenance::Permuted,
    )
}
