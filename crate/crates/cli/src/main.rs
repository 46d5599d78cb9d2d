//! `nsvit`: experiment harness for the nullspace ViT toolkit.
//!
//! Every experiment is reproducible from `(config, seed)`: all randomness
//! flows from one master seed through named substreams, and with
//! `--threads 1` re-runs produce byte-identical CSVs.

mod checkpoint;
mod commands;
mod csvio;
mod dataset;
mod runcfg;
mod util;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nsvit_core::finetune::{FinetuneConfig, NonconvergencePolicy};
use runcfg::{CommonArgs, RunConfig};

#[derive(Parser)]
#[command(name = "nsvit", version, about = "nullspace analysis and training for a toy ViT")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic raw-tensor dataset.
    GenData {
        /// Images per class.
        #[arg(long, default_value_t = 64)]
        samples_per_class: usize,
        /// Per-pixel Gaussian noise around the class template.
        #[arg(long, default_value_t = 0.12)]
        pixel_noise: f64,
    },
    /// Train the toy model with AdamW and a cosine schedule.
    Train {
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.01)]
        weight_decay: f64,
    },
    /// Exact patch-embedding nullspace: dimension, sampling, invariance.
    PatchNull {
        /// Model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Number of nullspace noises to sample.
        #[arg(long, default_value_t = 100)]
        noises: usize,
        /// Noise scale as a multiple of the mean image norm.
        #[arg(long, default_value_t = 10.0)]
        scale_mult: f64,
        /// Reuse one coefficient row for every patch.
        #[arg(long)]
        tiled: bool,
        /// Dump the first N noises (and a noised image) as PPM files.
        #[arg(long, default_value_t = 0)]
        dump_ppm: usize,
        /// Images evaluated per noise.
        #[arg(long, default_value_t = 5)]
        images_per_noise: usize,
    },
    /// Synthesize head parameters and certify the head-invariant noise.
    Prop1 {
        /// Token rows of the probe inputs.
        #[arg(long, default_value_t = 6)]
        tokens: usize,
        /// Number of random probe inputs.
        #[arg(long, default_value_t = 100)]
        inputs: usize,
        /// Row scales are drawn uniformly from [-range, range].
        #[arg(long, default_value_t = 100.0)]
        scale_range: f64,
    },
    /// Learn approximate encoder-level nullspace noise.
    LearnNoise {
        #[arg(long)]
        model: PathBuf,
        /// eps: thresholded inner loop; reg: regularized objective.
        #[arg(long, default_value = "eps")]
        mode: String,
        #[arg(long, default_value_t = 0.03)]
        eps: f64,
        /// Uniform initialization limit.
        #[arg(long, default_value_t = 3.0)]
        limit: f64,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        /// Regularization strengths for reg mode (repeatable).
        #[arg(long = "lambda", default_values_t = [0.01, 0.1, 1.0])]
        lambdas: Vec<f64>,
    },
    /// Noise-augmented fine-tuning rounds.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        /// nullspace | random.
        #[arg(long, default_value = "nullspace")]
        mode: String,
        #[arg(long, default_value_t = 20)]
        rounds: usize,
        #[arg(long, default_value_t = 1000)]
        noise_steps: usize,
        #[arg(long, default_value_t = 40)]
        model_steps: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0.03)]
        eps: f64,
        #[arg(long, default_value_t = 0.1)]
        noise_lr: f64,
        #[arg(long, default_value_t = 1e-4)]
        model_lr: f64,
        #[arg(long, default_value_t = 3.0)]
        limit: f64,
        /// Eval images for per-round metrics.
        #[arg(long, default_value_t = 128)]
        eval_subset: usize,
        /// Abort instead of skipping when a round's noise misses eps.
        #[arg(long)]
        abort_on_nonconverged: bool,
        /// Write a checkpoint after every round.
        #[arg(long)]
        save_rounds: bool,
    },
    /// Scaling and convex-combination sweeps plus grid heatmap.
    Properties {
        #[arg(long)]
        model: PathBuf,
        /// Common threshold the noise set is learned at.
        #[arg(long, default_value_t = 0.033)]
        eps: f64,
        /// Noise vectors in the set.
        #[arg(long, default_value_t = 20)]
        m: usize,
        /// Sampled pairs for the combination grid.
        #[arg(long, default_value_t = 5)]
        n_pairs: usize,
        /// Use the full-scale set sizes (m=100, n=10).
        #[arg(long)]
        paper_scale: bool,
        #[arg(long, default_value_t = 2.0)]
        alpha_max: f64,
        #[arg(long, default_value_t = 0.1)]
        grid_step: f64,
        #[arg(long, default_value_t = 500)]
        noise_steps: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Images used for the sweep evaluations.
        #[arg(long, default_value_t = 64)]
        eval_subset: usize,
        /// Also render the grid as SVG.
        #[arg(long)]
        svg: bool,
    },
    /// FGSM accuracy probe.
    Fgsm {
        #[arg(long)]
        model: PathBuf,
        /// Pixel budget on the [0,1] scale; 1/255 by default.
        #[arg(long, default_value_t = 1.0 / 255.0)]
        eps_pix: f64,
        /// Max images evaluated.
        #[arg(long, default_value_t = 256)]
        limit: usize,
    },
    /// Aggregate round logs into a normalized trend table.
    Report {
        /// rounds.csv files from one or more runs.
        inputs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match RunConfig::resolve(&cli.common) {
        Ok(cfg) => cfg,
        Err(e) => return fail(&e),
    };
    let result = match &cli.cmd {
        Cmd::GenData { samples_per_class, pixel_noise } => {
            commands::gen_data(&cfg, *samples_per_class, *pixel_noise)
        }
        Cmd::Train { steps, batch, lr, weight_decay } => {
            commands::train(&cfg, *steps, *batch, *lr, *weight_decay)
        }
        Cmd::PatchNull { model, noises, scale_mult, tiled, dump_ppm, images_per_noise } => {
            commands::patch_null(&cfg, model, *noises, *scale_mult, *tiled, *dump_ppm, *images_per_noise)
        }
        Cmd::Prop1 { tokens, inputs, scale_range } => {
            commands::prop1(&cfg, *tokens, *inputs, *scale_range)
        }
        Cmd::LearnNoise { model, mode, eps, limit, lr, steps, batch, lambdas } => {
            commands::learn_noise(&cfg, model, mode, *eps, *limit, *lr, *steps, *batch, lambdas)
        }
        Cmd::Finetune {
            model,
            mode,
            rounds,
            noise_steps,
            model_steps,
            batch,
            eps,
            noise_lr,
            model_lr,
            limit,
            eval_subset,
            abort_on_nonconverged,
            save_rounds,
        } => {
            let fcfg = FinetuneConfig {
                rounds: *rounds,
                noise_steps: *noise_steps,
                model_steps: *model_steps,
                batch: *batch,
                eps: *eps,
                noise_lr: *noise_lr,
                model_lr: *model_lr,
                limit: *limit,
                eval_subset: *eval_subset,
                on_nonconvergence: if *abort_on_nonconverged {
                    NonconvergencePolicy::Abort
                } else {
                    NonconvergencePolicy::SkipRound
                },
                ..FinetuneConfig::desk()
            };
            commands::finetune(&cfg, model, mode, fcfg, *save_rounds)
        }
        Cmd::Properties {
            model,
            eps,
            m,
            n_pairs,
            paper_scale,
            alpha_max,
            grid_step,
            noise_steps,
            batch,
            eval_subset,
            svg,
        } => {
            let (m, n_pairs) = if *paper_scale { (100, 10) } else { (*m, *n_pairs) };
            commands::properties(
                &cfg, model, *eps, m, n_pairs, *alpha_max, *grid_step, *noise_steps, *batch,
                *eval_subset, *svg,
            )
        }
        Cmd::Fgsm { model, eps_pix, limit } => commands::fgsm(&cfg, model, *eps_pix, *limit),
        Cmd::Report { inputs } => commands::report(&cfg, inputs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &anyhow::Error) -> ExitCode {
    // single machine-readable error line on stderr
    let msg = format!("{e:#}").replace('"', "'").replace('\n', " ");
    eprintln!("{{\"error\":\"{msg}\"}}");
    ExitCode::FAILURE
}
