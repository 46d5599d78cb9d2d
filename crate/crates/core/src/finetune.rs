//! Noise-augmented fine-tuning: alternate thresholded noise synthesis
//! with model updates on the paired loss `CE(z, y) + CE(z', y)`, where
//! `z'` uses the frozen round noise.
//!
//! `Nullspace` mode learns the round noise with the thresholded inner
//! loop; `Random` mode draws Gaussian noise and bisects its scale until
//! its influence on a calibration batch sits at the same threshold. The
//! two modes share every other line of the loop.

use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{BatchSampler, LabeledImages};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::noise::{self, EpsNoiseConfig, NoiseVector, Provenance};
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::property;
use crate::rng::{normal, Substreams};
use crate::tensor::Tape;
use crate::vit::{self, ViTParams};

/// Wall-clock source; the core stays `no_std`, so callers inject one.
pub trait Clock {
    fn now_seconds(&self) -> f64;
}

/// Clock stub for contexts without a time source; all rounds report 0.
pub struct NoClock;

impl Clock for NoClock {
    fn now_seconds(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMode {
    Nullspace,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonconvergencePolicy {
    /// Log the round as rejected, skip its model steps, continue.
    SkipRound,
    /// Fail the run.
    Abort,
}

#[derive(Debug, Clone, Copy)]
pub struct FinetuneConfig {
    /// Outer rounds K.
    pub rounds: usize,
    /// Noise step budget T per round.
    pub noise_steps: usize,
    /// Model steps S per round.
    pub model_steps: usize,
    /// Batch size B for both phases.
    pub batch: usize,
    /// Noise nullity threshold.
    pub eps: f64,
    /// Noise learning rate.
    pub noise_lr: f64,
    /// Model learning rate.
    pub model_lr: f64,
    /// Uniform sampling limit A for noise initialization.
    pub limit: f64,
    pub mode: FinetuneMode,
    pub on_nonconvergence: NonconvergencePolicy,
    pub model_weight_decay: f64,
    /// Eval images used for per-round metrics.
    pub eval_subset: usize,
    /// FGSM pixel budget for the per-round probe.
    pub fgsm_eps: f64,
}

impl FinetuneConfig {
    /// Full-scale values: K=20, T=3000, S=40, B=128, eps=0.03,
    /// noise lr 0.1, model lr 1e-5, limit 3.
    pub fn paper() -> Self {
        FinetuneConfig {
            rounds: 20,
            noise_steps: 3000,
            model_steps: 40,
            batch: 128,
            eps: 0.03,
            noise_lr: 0.1,
            model_lr: 1e-5,
            limit: 3.0,
            mode: FinetuneMode::Nullspace,
            on_nonconvergence: NonconvergencePolicy::SkipRound,
            model_weight_decay: 0.01,
            eval_subset: 128,
            fgsm_eps: 1.0 / 255.0,
        }
    }

    /// Desk scale shrinks the noise budget and batch (T=1000, B=64); the
    /// toy model reaches the threshold much faster than a full-size one.
    /// The model learning rate is raised to 1e-4: at a few hundred total
    /// steps the full-scale 1e-5 cannot move the toy model measurably.
    pub fn desk() -> Self {
        FinetuneConfig {
            noise_steps: 1000,
            batch: 64,
            model_lr: 1e-4,
            ..Self::paper()
        }
    }
}

/// Per-round record.
#[derive(Debug, Clone, Copy)]
pub struct RoundLog {
    pub round: usize,
    /// Influence of the accepted noise on its final minibatch.
    pub delta: f64,
    /// Whether the noise met the threshold (rejected rounds skip training).
    pub accepted: bool,
    pub noise_norm: f64,
    pub provenance: Provenance,
    /// Influence re-evaluated on the eval subset.
    pub delta_full: f64,
    pub clean_accuracy: f64,
    pub fgsm_accuracy: f64,
    pub match_rate: f64,
    pub wall_seconds: f64,
}

pub fn nullspace_finetune(
    params: &mut ViTParams,
    train: &LabeledImages,
    eval: &LabeledImages,
    cfg: &FinetuneConfig,
    subs: &Substreams,
    clock: &dyn Clock,
) -> Result<Vec<RoundLog>> {
    run_finetune(params, train, eval, &FinetuneConfig { mode: FinetuneMode::Nullspace, ..*cfg }, subs, clock)
}

pub fn random_noise_finetune(
    params: &mut ViTParams,
    train: &LabeledImages,
    eval: &LabeledImages,
    cfg: &FinetuneConfig,
    subs: &Substreams,
    clock: &dyn Clock,
) -> Result<Vec<RoundLog>> {
    run_finetune(params, train, eval, &FinetuneConfig { mode: FinetuneMode::Random, ..*cfg }, subs, clock)
}

/// The shared outer loop; the mode only selects the noise source.
pub fn run_finetune(
    params: &mut ViTParams,
    train: &LabeledImages,
    eval: &LabeledImages,
    cfg: &FinetuneConfig,
    subs: &Substreams,
    clock: &dyn Clock,
) -> Result<Vec<RoundLog>> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::EmptyMatrix { op: "run_finetune" });
    }
    let sizes: Vec<usize> = params.tensors().iter().map(|(_, m)| m.len()).collect();
    let total_model_steps = cfg.rounds * cfg.model_steps;
    let mut opt = AdamW::new(
        AdamWConfig::new(cfg.model_lr, Schedule::Cosine { total_steps: total_model_steps })
            .with_weight_decay(cfg.model_weight_decay),
        &sizes,
    );
    let mut sampler = BatchSampler::new(train.len(), cfg.batch, subs.stream("model-shuffle"));
    let eval_subset = eval.take(cfg.eval_subset.min(eval.len()));
    let mut logs = Vec::with_capacity(cfg.rounds);
    let started = clock.now_seconds();

    for round in 0..cfg.rounds {
        let (noise, delta, converged) = match cfg.mode {
            FinetuneMode::Nullspace => {
                let ncfg = EpsNoiseConfig {
                    eps: cfg.eps,
                    lr: cfg.noise_lr,
                    max_steps: cfg.noise_steps,
                    limit: cfg.limit,
                    batch: cfg.batch,
                };
                let mut rng = subs.stream_indexed("noise-init", round as u64);
                let out = noise::learn_eps_noise(params, train, &ncfg, &mut rng)?;
                (out.noise, out.delta, out.converged)
            }
            FinetuneMode::Random => {
                let mut rng = subs.stream_indexed("random-noise", round as u64);
                let (noise, delta) = calibrated_random_noise(params, train, cfg, &mut rng)?;
                (noise, delta, true)
            }
        };

        if !converged {
            log::warn!("round {round}: noise stopped at delta {delta:.4} >= eps {}", cfg.eps);
            match cfg.on_nonconvergence {
                NonconvergencePolicy::Abort => {
                    return Err(Error::NoiseNotConverged { round, delta });
                }
                NonconvergencePolicy::SkipRound => {
                    logs.push(round_metrics(
                        params, &eval_subset, cfg, round, &noise, delta, false,
                        clock.now_seconds() - started,
                    )?);
                    continue;
                }
            }
        }

        for s in 0..cfg.model_steps {
            let idx = sampler.next_batch();
            let images: Vec<&[f64]> =
                idx.iter().map(|&i| train.images[i].as_slice()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();

            let mut tape = Tape::new();
            let opts = vit::ForwardOptions {
                trainable: true,
                noise: Some((&noise.values, false)),
                ..Default::default()
            };
            let fwd = vit::batch_forward(&mut tape, params, &images, &opts)?;
            // clean pass on the same tape, sharing the parameter leaves
            let bound = &fwd.bound;
            let embedded = tape.matmul(fwd.patches, bound.patch_weight)?;
            let tokens = tape.add_row(embedded, bound.patch_bias)?;
            let cls_clean = vit::cls_states_from_tokens(
                &mut tape, bound, &params.cfg, tokens, images.len(), None,
            )?;
            let z_clean = tape.matmul(cls_clean, bound.classifier)?;

            let ce_noised = tape.cross_entropy(fwd.logits, &labels)?;
            let ce_clean = tape.cross_entropy(z_clean, &labels)?;
            let loss = tape.add(ce_clean, ce_noised)?;
            if !tape.item(loss).is_finite() {
                return Err(Error::Diverged { step: round * cfg.model_steps + s });
            }
            tape.backward(loss)?;

            let ids = fwd.bound.ids().to_vec();
            let grads: Vec<&[f64]> =
                ids.iter().map(|&id| tape.grad(id).expect("trainable")).collect();
            let mut tensors = params.tensors_mut();
            let mut bufs: Vec<&mut [f64]> =
                tensors.iter_mut().map(|(_, m)| m.as_mut_slice()).collect();
            opt.step(&mut bufs, &grads);
        }

        logs.push(round_metrics(
            params, &eval_subset, cfg, round, &noise, delta, true,
            clock.now_seconds() - started,
        )?);
    }
    Ok(logs)
}

#[allow(clippy::too_many_arguments)]
fn round_metrics(
    params: &ViTParams,
    eval_subset: &LabeledImages,
    cfg: &FinetuneConfig,
    round: usize,
    noise: &NoiseVector,
    delta: f64,
    accepted: bool,
    wall_seconds: f64,
) -> Result<RoundLog> {
    let clean = noise::clean_eval(params, eval_subset)?;
    let correct = clean
        .preds
        .iter()
        .zip(&eval_subset.labels)
        .filter(|(p, l)| p == l)
        .count();
    let clean_accuracy = correct as f64 / eval_subset.len() as f64;
    let metrics = noise::evaluate_noise_cached(params, &clean, &noise.values)?;
    if accepted && metrics.mse_prob > 2.0 * cfg.eps {
        log::warn!(
            "round {round}: eval-split delta {:.4} exceeds 2*eps (minibatch slack)",
            metrics.mse_prob
        );
    }
    let fgsm = property::fgsm_accuracy(params, eval_subset, cfg.fgsm_eps)?;
    Ok(RoundLog {
        round,
        delta,
        accepted,
        noise_norm: noise.norm,
        provenance: noise.provenance,
        delta_full: metrics.mse_prob,
        clean_accuracy,
        fgsm_accuracy: fgsm,
        match_rate: metrics.match_rate,
        wall_seconds,
    })
}

/// Gaussian noise rescaled by bisection until its influence on a
/// calibration batch is within 10% of the threshold.
fn calibrated_random_noise(
    params: &ViTParams,
    train: &LabeledImages,
    cfg: &FinetuneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(NoiseVector, f64)> {
    let mcfg = &params.cfg;
    let mut direction = Mat::zeros(mcfg.n_patches(), mcfg.embed_dim);
    for v in direction.as_mut_slice().iter_mut() {
        *v = normal(rng);
    }
    let norm = direction.frob_norm();
    let direction = direction.scale(1.0 / norm);

    let calib = cfg.batch.min(train.len());
    let mut idx: Vec<usize> = Vec::with_capacity(calib);
    while idx.len() < calib {
        let candidate = rng.gen_range(0..train.len());
        idx.push(candidate);
    }
    let calib_set = train.subset(&idx);
    let clean = noise::clean_eval(params, &calib_set)?;
    let delta_at = |scale: f64| -> Result<f64> {
        let scaled = direction.scale(scale);
        Ok(noise::evaluate_noise_cached(params, &clean, &scaled)?.mse_prob)
    };

    let mut hi = 1.0;
    let mut d_hi = delta_at(hi)?;
    let mut grow = 0;
    while d_hi < cfg.eps {
        hi *= 2.0;
        d_hi = delta_at(hi)?;
        grow += 1;
        if grow > 40 {
            return Err(Error::CalibrationFailed { target: cfg.eps, achieved: d_hi });
        }
    }
    let mut lo = 0.0;
    let mut best = (hi, d_hi);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let d = delta_at(mid)?;
        if (d - cfg.eps).abs() < (best.1 - cfg.eps).abs() {
            best = (mid, d);
        }
        if (d - cfg.eps).abs() <= 0.1 * cfg.eps {
            best = (mid, d);
            break;
        }
        if d < cfg.eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.1 < 0.5 * cfg.eps || best.1 > 1.5 * cfg.eps {
        return Err(Error::CalibrationFailed { target: cfg.eps, achieved: best.1 });
    }
    Ok((NoiseVector::new(direction.scale(best.0), Provenance::Random), best.1))
}

/// One metric column of a normalized trend table.
#[derive(Debug, Clone)]
pub struct TrendSeries {
    pub name: &'static str,
    pub values: Vec<f64>,
    /// False when the first value was zero and the series was left raw.
    pub normalized: bool,
}

/// Divides each logged metric series by its first value. Series whose
/// first value is zero are left unnormalized and flagged.
pub fn track_trend(logs: &[RoundLog]) -> Vec<TrendSeries> {
    let series: [(&'static str, fn(&RoundLog) -> f64); 5] = [
        ("noise_norm", |l| l.noise_norm),
        ("delta_full", |l| l.delta_full),
        ("clean_accuracy", |l| l.clean_accuracy),
        ("fgsm_accuracy", |l| l.fgsm_accuracy),
        ("match_rate", |l| l.match_rate),
    ];
    series
        .iter()
        .map(|(name, get)| {
            let raw: Vec<f64> = logs.iter().map(get).collect();
            let first = raw.first().copied().unwrap_or(0.0);
            if first == 0.0 {
                TrendSeries { name, values: raw, normalized: false }
            } else {
                TrendSeries {
                    name,
                    values: raw.iter().map(|v| v / first).collect(),
                    normalized: true,
                }
            }
        })
        .collect()
}
