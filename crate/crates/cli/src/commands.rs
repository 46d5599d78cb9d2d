//! One function per subcommand.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use nsvit_core::attention_nullspace as attn;
use nsvit_core::data::{synthetic_dataset, LabeledImages, SyntheticConfig};
use nsvit_core::finetune::{
    self, FinetuneConfig, FinetuneMode, NonconvergencePolicy, RoundLog,
};
use nsvit_core::noise::{self, EpsNoiseConfig, NoiseVector, Provenance};
use nsvit_core::patch_nullspace::{self, PatchNoiseMode};
use nsvit_core::property;
use nsvit_core::rng::{normal, Substreams};
use nsvit_core::vit::{self, TrainConfig, ViTParams};
use nsvit_core::Mat;

use crate::checkpoint;
use crate::csvio::{read_csv, CsvWriter};
use crate::dataset;
use crate::runcfg::RunConfig;
use crate::util::{par_map, write_ppm, write_svg_heatmap, WallClock};

fn load_data(cfg: &RunConfig) -> Result<LabeledImages> {
    dataset::load_dataset(cfg.require_dataset()?, cfg.format)
}

fn load_eval_data(cfg: &RunConfig) -> Result<Option<LabeledImages>> {
    match &cfg.eval_dataset {
        Some(path) => Ok(Some(dataset::load_dataset(path, cfg.format)?)),
        None => Ok(None),
    }
}

// ── gen-data ────────────────────────────────────────────────────────

pub fn gen_data(cfg: &RunConfig, samples_per_class: usize, pixel_noise: f64) -> Result<()> {
    let subs = Substreams::new(cfg.seed);
    let sc = SyntheticConfig {
        channels: cfg.model.channels,
        image_size: cfg.model.image_size,
        num_classes: cfg.model.num_classes,
        samples_per_class,
        pixel_noise,
    };
    let data = synthetic_dataset(&sc, &mut subs.stream("data"));
    let path = cfg.out_path("dataset.nsvit")?;
    dataset::write_raw_tensor(&path, &data)?;
    println!(
        "wrote {} images ({} classes) to {}",
        data.len(),
        sc.num_classes,
        path.display()
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

pub fn train(cfg: &RunConfig, steps: usize, batch: usize, lr: f64, weight_decay: f64) -> Result<()> {
    let data = load_data(cfg)?;
    let subs = Substreams::new(cfg.seed);
    let mut params = ViTParams::init(cfg.model, &mut subs.stream("model-init"))
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let tcfg = TrainConfig { steps, batch, lr, weight_decay, log_every: 10 };
    let report = vit::train_supervised(&mut params, &data, &tcfg, subs.stream("data-shuffle"))
        .map_err(|e| anyhow::anyhow!("{e}"))?;

    let mut csv = CsvWriter::new(&["step", "loss", "batch_accuracy"]);
    for p in &report.curve {
        csv.row_display(&[&p.step, &p.loss, &p.batch_accuracy]);
    }
    csv.finish(&cfg.out_path("train_curve.csv")?, cfg.seed)?;

    let ckpt = cfg.out_path("model.ckpt")?;
    checkpoint::save_model(&ckpt, &params, cfg.seed)?;
    let train_acc = vit::accuracy(&params, &data).map_err(|e| anyhow::anyhow!("{e}"))?;
    println!("final loss {:.4}, train accuracy {:.4}", report.final_loss, train_acc);
    if let Some(eval) = load_eval_data(cfg)? {
        let acc = vit::accuracy(&params, &eval).map_err(|e| anyhow::anyhow!("{e}"))?;
        println!("eval accuracy {acc:.4}");
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

// ── patch-null ──────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
pub fn patch_null(
    cfg: &RunConfig,
    model_path: &PathBuf,
    noises: usize,
    scale_mult: f64,
    tiled: bool,
    dump_ppm: usize,
    images_per_noise: usize,
) -> Result<()> {
    let params = checkpoint::load_model(model_path)?;
    let data = load_data(cfg)?;
    let basis = patch_nullspace::compute_patch_nullspace(&params)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    println!("patch nullspace dimension: {}", basis.dim());
    if basis.is_empty() {
        bail!("nullspace is trivial; nothing to sample (need patch dim > embed dim)");
    }
    let scale = scale_mult * data.mean_image_norm();
    let mode = if tiled { PatchNoiseMode::Tiled } else { PatchNoiseMode::PerPatch };
    let subs = Substreams::new(cfg.seed);

    let jobs: Vec<usize> = (0..noises).collect();
    let rows = par_map(jobs, cfg.threads, |i| {
        let mut rng = subs.stream_indexed("noise-init", i as u64);
        let sampled = patch_nullspace::sample_patch_noise(&params.cfg, &basis, scale, mode, &mut rng)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let start = (i * images_per_noise) % data.len();
        let idx: Vec<usize> = (0..images_per_noise.min(data.len()))
            .map(|k| (start + k) % data.len())
            .collect();
        let subset = data.subset(&idx);
        let report = patch_nullspace::verify_model_invariance(&params, &subset, &sampled.rendered)
            .map_err(|e| anyhow::anyhow!("{e}"))?;

        // same-norm Gaussian control
        let mut grng = subs.stream_indexed("permutation", i as u64);
        let mut gauss: Vec<f64> =
            (0..data.pixel_count()).map(|_| normal(&mut grng)).collect();
        let gn = nsvit_core::mat::l2_norm(&gauss);
        for v in gauss.iter_mut() {
            *v *= scale / gn;
        }
        let control = patch_nullspace::verify_model_invariance(&params, &subset, &gauss)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok::<_, anyhow::Error>((i, sampled, report, control))
    });

    let mut csv = CsvWriter::new(&[
        "noise", "kind", "norm", "max_logit_dev", "match_rate", "mse_prob",
    ]);
    let mut worst = 0.0f64;
    let mut all_match = true;
    for row in rows {
        let (i, sampled, report, control) = row?;
        worst = worst.max(report.max_logit_dev);
        all_match &= report.match_rate == 1.0;
        csv.row_display(&[
            &i, &"nullspace", &sampled.norm, &report.max_logit_dev, &report.match_rate,
            &report.mse_prob,
        ]);
        csv.row_display(&[
            &i, &"gaussian", &scale, &control.max_logit_dev, &control.match_rate,
            &control.mse_prob,
        ]);
        if i < dump_ppm {
            let shifted: Vec<f64> = sampled.rendered.iter().map(|v| v + 0.5).collect();
            write_ppm(
                &cfg.out_path(&format!("noise_{i}.ppm"))?,
                &shifted,
                params.cfg.channels,
                params.cfg.image_size,
                params.cfg.image_size,
            )?;
            let noised = patch_nullspace::apply_noise(&data.images[0], &sampled.rendered, false);
            write_ppm(
                &cfg.out_path(&format!("noised_{i}.ppm"))?,
                &noised,
                params.cfg.channels,
                params.cfg.image_size,
                params.cfg.image_size,
            )?;
        }
    }
    csv.finish(&cfg.out_path("patch_null.csv")?, cfg.seed)?;
    println!(
        "{} noises at scale {:.3}: max logit deviation {:.3e}, all matches: {}",
        noises, scale, worst, all_match
    );
    Ok(())
}

// ── prop1 ───────────────────────────────────────────────────────────

pub fn prop1(cfg: &RunConfig, tokens: usize, inputs: usize, scale_range: f64) -> Result<()> {
    let d = cfg.model.embed_dim;
    let h = cfg.model.heads;
    let dk = cfg.model.head_dim();
    let subs = Substreams::new(cfg.seed);
    let mut rng = subs.stream("prop1");
    let params =
        attn::synth_head_params(d, h, dk, dk, &mut rng).map_err(|e| anyhow::anyhow!("{e}"))?;
    let report = attn::check_conditions(&params).map_err(|e| anyhow::anyhow!("{e}"))?;

    let tol = 1e-9;
    let mut csv = CsvWriter::new(&["head", "symmetry_residual", "value_inclusion_residual"]);
    for i in 0..h {
        csv.row_display(&[
            &i,
            &report.symmetry_residuals[i],
            &report.value_inclusion_residuals[i],
        ]);
    }
    csv.finish(&cfg.out_path("prop1_conditions.csv")?, cfg.seed)?;

    let scales: Vec<f64> =
        (0..tokens).map(|_| scale_range * (2.0 * rand::Rng::gen::<f64>(&mut rng) - 1.0)).collect();
    let nw = attn::construct_null_w(&params, &scales).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut worst_dev = 0.0f64;
    let mut worst_cross = 0.0f64;
    let mut worst_control = f64::INFINITY;
    for _ in 0..inputs {
        let x = random_mat(&mut rng, tokens, d);
        worst_dev = worst_dev
            .max(attn::verify_head_invariance(&params, &x, &nw.rows).map_err(err)?);
        worst_cross =
            worst_cross.max(attn::cross_term_residual(&params, &x, &nw.rows).map_err(err)?);
        let mut control = random_mat(&mut rng, tokens, d);
        control = control.scale(nw.rows.frob_norm() / control.frob_norm());
        worst_control = worst_control
            .min(attn::verify_head_invariance(&params, &x, &control).map_err(err)?);
    }

    let lines = [
        format!(
            "{{\"condition\":1,\"pass\":{},\"worst_residual\":{:e}}}",
            report.condition1_passes(tol),
            report.symmetry_residuals.iter().copied().fold(0.0, f64::max)
        ),
        format!(
            "{{\"condition\":2,\"pass\":{},\"worst_residual\":{:e}}}",
            report.condition2_passes(tol),
            report.value_inclusion_residuals.iter().copied().fold(0.0, f64::max)
        ),
        format!(
            "{{\"condition\":3,\"pass\":{},\"witness\":[{},{},{}],\"residual\":{:e}}}",
            report.condition3_passes(tol),
            report.colinearity.0,
            report.colinearity.1,
            report.colinearity.2,
            report.colinearity.3
        ),
        format!("{{\"dim_s\":{},\"dim_s_perp\":{}}}", report.dim_s, report.dim_s_perp),
        format!(
            "{{\"head_invariance_dev\":{worst_dev:e},\"cross_term\":{worst_cross:e},\
             \"control_dev\":{worst_control:e}}}"
        ),
    ];
    std::fs::write(cfg.out_path("prop1_report.jsonl")?, lines.join("\n") + "\n")?;

    for (i, pass) in [
        report.condition1_passes(tol),
        report.condition2_passes(tol),
        report.condition3_passes(tol),
    ]
    .iter()
    .enumerate()
    {
        println!("condition {}: {}", i + 1, if *pass { "pass" } else { "FAIL" });
    }
    println!(
        "dim(S) = {} (complement {}), head deviation {:.3e}, cross terms {:.3e}, control {:.3e}",
        report.dim_s, report.dim_s_perp, worst_dev, worst_cross, worst_control
    );
    if !report.all_pass(tol) || worst_dev > 1e-8 {
        bail!("head-invariance certification failed");
    }
    Ok(())
}

fn err(e: nsvit_core::Error) -> anyhow::Error {
    anyhow::anyhow!("{e}")
}

fn random_mat(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| normal(rng)).collect()).expect("sized")
}

// ── learn-noise ─────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
pub fn learn_noise(
    cfg: &RunConfig,
    model_path: &PathBuf,
    mode: &str,
    eps: f64,
    limit: f64,
    lr: f64,
    steps: usize,
    batch: usize,
    lambdas: &[f64],
) -> Result<()> {
    let params = checkpoint::load_model(model_path)?;
    let data = load_data(cfg)?;
    let eval = load_eval_data(cfg)?;
    let subs = Substreams::new(cfg.seed);

    match mode {
        "eps" => {
            let ncfg = EpsNoiseConfig { eps, lr, max_steps: steps, limit, batch };
            let mut rng = subs.stream("noise-init");
            let out = noise::learn_eps_noise(&params, &data, &ncfg, &mut rng).map_err(err)?;
            write_trace(cfg, "noise_trace.csv", &out.trace)?;
            checkpoint::save_noise(&cfg.out_path("noise.ckpt")?, &out.noise, cfg.seed)?;
            println!(
                "{} after {} steps: delta {:.5} (eps {}), norm {:.3}",
                if out.converged { "converged" } else { "NOT converged" },
                out.steps,
                out.delta,
                eps,
                out.noise.norm
            );
            if let Some(eval) = eval {
                let m = noise::evaluate_noise(&params, &eval, &out.noise).map_err(err)?;
                println!(
                    "held-out: mse_prob {:.5}, match_rate {:.4}, mse_logit {:.5}",
                    m.mse_prob, m.match_rate, m.mse_logit
                );
            }
        }
        "reg" => {
            let mut summary = CsvWriter::new(&["lambda", "final_norm", "mse_prob", "match_rate"]);
            for &lambda in lambdas {
                let mut rng = subs.stream_indexed("noise-init", (lambda * 1e6) as u64);
                let (nv, trace) = noise::learn_noise_regularized(
                    &params, &data, lambda, lr, steps, batch, limit, &mut rng,
                )
                .map_err(err)?;
                write_trace(cfg, &format!("reg_trace_lambda{lambda}.csv"), &trace)?;
                checkpoint::save_noise(
                    &cfg.out_path(&format!("reg_noise_lambda{lambda}.ckpt"))?,
                    &nv,
                    cfg.seed,
                )?;
                let eval_ref = eval.as_ref().unwrap_or(&data);
                let m = noise::evaluate_noise(&params, eval_ref, &nv).map_err(err)?;
                summary.row_display(&[&lambda, &nv.norm, &m.mse_prob, &m.match_rate]);
                println!(
                    "lambda {lambda}: norm {:.3}, mse_prob {:.5}, match_rate {:.4}",
                    nv.norm, m.mse_prob, m.match_rate
                );
            }
            summary.finish(&cfg.out_path("reg_summary.csv")?, cfg.seed)?;
        }
        other => bail!("unknown mode {other:?} (eps | reg)"),
    }
    Ok(())
}

fn write_trace(cfg: &RunConfig, name: &str, trace: &[noise::NoiseTracePoint]) -> Result<()> {
    let mut csv = CsvWriter::new(&["step", "loss", "mse_prob", "match_rate", "norm"]);
    for p in trace {
        csv.row_display(&[&p.step, &p.loss, &p.mse_prob, &p.match_rate, &p.norm]);
    }
    csv.finish(&cfg.out_path(name)?, cfg.seed)
}

// ── finetune ────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
pub fn finetune(
    cfg: &RunConfig,
    model_path: &PathBuf,
    mode: &str,
    fcfg: FinetuneConfig,
    save_rounds: bool,
) -> Result<()> {
    let mut params = checkpoint::load_model(model_path)?;
    let train = load_data(cfg)?;
    let eval = load_eval_data(cfg)?
        .context("finetune needs --eval-dataset for the per-round metrics")?;
    let mode = match mode {
        "nullspace" => FinetuneMode::Nullspace,
        "random" => FinetuneMode::Random,
        other => bail!("unknown mode {other:?} (nullspace | random)"),
    };
    let fcfg = FinetuneConfig { mode, ..fcfg };
    let subs = Substreams::new(cfg.seed);
    let clock = WallClock::new();

    let logs = if save_rounds {
        // run round by round so intermediate checkpoints can be written
        let mut all = Vec::new();
        for k in 0..fcfg.rounds {
            let one = FinetuneConfig { rounds: 1, ..fcfg };
            let subs_k = Substreams::new(cfg.seed ^ (k as u64) << 32);
            let mut logs =
                finetune::run_finetune(&mut params, &train, &eval, &one, &subs_k, &clock)
                    .map_err(err)?;
            logs[0].round = k;
            checkpoint::save_model(
                &cfg.out_path(&format!("model_round{k}.ckpt"))?,
                &params,
                cfg.seed,
            )?;
            all.extend(logs);
        }
        all
    } else {
        finetune::run_finetune(&mut params, &train, &eval, &fcfg, &subs, &clock).map_err(err)?
    };

    write_round_logs(cfg, "rounds.csv", &logs)?;
    checkpoint::save_model(&cfg.out_path("model_finetuned.ckpt")?, &params, cfg.seed)?;
    let accepted = logs.iter().filter(|l| l.accepted).count();
    println!(
        "{} rounds ({} accepted); final clean accuracy {:.4}, fgsm {:.4}",
        logs.len(),
        accepted,
        logs.last().map(|l| l.clean_accuracy).unwrap_or(0.0),
        logs.last().map(|l| l.fgsm_accuracy).unwrap_or(0.0)
    );
    Ok(())
}

fn write_round_logs(cfg: &RunConfig, name: &str, logs: &[RoundLog]) -> Result<()> {
    let mut csv = CsvWriter::new(&[
        "round", "delta", "accepted", "noise_norm", "provenance", "delta_full",
        "clean_accuracy", "fgsm_accuracy", "match_rate", "wall_seconds",
    ]);
    for l in logs {
        csv.row_display(&[
            &l.round,
            &l.delta,
            &l.accepted,
            &l.noise_norm,
            &l.provenance.as_str(),
            &l.delta_full,
            &l.clean_accuracy,
            &l.fgsm_accuracy,
            &l.match_rate,
            &l.wall_seconds,
        ]);
    }
    csv.finish(&cfg.out_path(name)?, cfg.seed)
}

// ── properties ──────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
pub fn properties(
    cfg: &RunConfig,
    model_path: &PathBuf,
    eps: f64,
    m: usize,
    n_pairs: usize,
    alpha_max: f64,
    grid_step: f64,
    noise_steps: usize,
    batch: usize,
    eval_subset: usize,
    svg: bool,
) -> Result<()> {
    let params = checkpoint::load_model(model_path)?;
    let data = load_data(cfg)?;
    let eval_set = data.take(eval_subset.min(data.len()));
    let subs = Substreams::new(cfg.seed);
    let ncfg = EpsNoiseConfig {
        eps,
        lr: 0.1,
        max_steps: noise_steps,
        limit: 3.0,
        batch,
    };

    let jobs: Vec<usize> = (0..m).collect();
    let noises: Vec<NoiseVector> = par_map(jobs, cfg.threads, |i| {
        let mut rng = subs.stream_indexed("property-noise", i as u64);
        let out = noise::learn_eps_noise(&params, &data, &ncfg, &mut rng).map_err(err)?;
        if !out.converged {
            log::warn!("property noise {i} stopped at delta {:.4}", out.delta);
        }
        Ok::<_, anyhow::Error>(out.noise)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let steps = (alpha_max / grid_step).round() as usize;
    let alphas: Vec<f64> = (0..=steps).map(|i| i as f64 * grid_step).collect();
    let curve = property::scaling_sweep(&params, &eval_set, &noises, &alphas).map_err(err)?;
    let mut csv = CsvWriter::new(&["alpha", "mean_mse_prob"]);
    for (a, v) in &curve {
        csv.row_display(&[a, v]);
    }
    csv.finish(&cfg.out_path("scaling_sweep.csv")?, cfg.seed)?;

    let mut pair_rng = subs.stream("property-pairs");
    let pairs: Vec<(usize, usize)> = (0..n_pairs)
        .map(|_| {
            let a = rand::Rng::gen_range(&mut pair_rng, 0..m);
            let mut b = rand::Rng::gen_range(&mut pair_rng, 0..m);
            while b == a && m > 1 {
                b = rand::Rng::gen_range(&mut pair_rng, 0..m);
            }
            (a, b)
        })
        .collect();
    let grid = property::convex_grid(&params, &eval_set, &noises, &pairs, grid_step).map_err(err)?;
    let mut gcsv = CsvWriter::new(
        &std::iter::once("alpha1".to_string())
            .chain(grid.alphas.iter().map(|a| format!("a2_{a}")))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    for (i, a1) in grid.alphas.iter().enumerate() {
        let mut cells: Vec<String> = vec![format!("{a1}")];
        for j in 0..grid.alphas.len() {
            cells.push(format!("{}", grid.cells.at(i, j)));
        }
        gcsv.row(&cells);
    }
    gcsv.finish(&cfg.out_path("convex_grid.csv")?, cfg.seed)?;
    if svg {
        write_svg_heatmap(&cfg.out_path("convex_grid.svg")?, &grid.alphas, &grid.cells)?;
    }

    let at = |target: f64| {
        curve
            .iter()
            .find(|(a, _)| (a - target).abs() < 1e-9)
            .map(|(_, v)| *v)
            .unwrap_or(f64::NAN)
    };
    println!(
        "m={m} noises at eps {eps}: mse(0.5x) {:.5}, mse(1x) {:.5}; grid diag max {:.5}",
        at(0.5),
        at(1.0),
        diag_max(&grid)
    );
    Ok(())
}

fn diag_max(grid: &property::PropertyGrid) -> f64 {
    // cells on alpha1 + alpha2 = 1
    let n = grid.alphas.len();
    let mut worst = 0.0f64;
    for i in 0..n {
        let j = n - 1 - i;
        if (grid.alphas[i] + grid.alphas[j] - 1.0).abs() < 1e-9 {
            worst = worst.max(grid.cells.at(i, j));
        }
    }
    worst
}

// ── fgsm ────────────────────────────────────────────────────────────

pub fn fgsm(cfg: &RunConfig, model_path: &PathBuf, eps_pix: f64, limit: usize) -> Result<()> {
    let params = checkpoint::load_model(model_path)?;
    let data = load_data(cfg)?;
    let subset = data.take(limit.min(data.len()));
    let clean = vit::accuracy(&params, &subset).map_err(err)?;
    let attacked = property::fgsm_accuracy(&params, &subset, eps_pix).map_err(err)?;
    let mut csv = CsvWriter::new(&["eps_pix", "images", "clean_accuracy", "fgsm_accuracy"]);
    csv.row_display(&[&eps_pix, &subset.len(), &clean, &attacked]);
    csv.finish(&cfg.out_path("fgsm.csv")?, cfg.seed)?;
    println!(
        "clean {:.4} -> fgsm({:.6}) {:.4} over {} images",
        clean, eps_pix, attacked, subset.len()
    );
    Ok(())
}

// ── report ──────────────────────────────────────────────────────────

pub fn report(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<()> {
    if inputs.is_empty() {
        bail!("report needs at least one rounds.csv");
    }
    let mut per_file: Vec<Vec<finetune::TrendSeries>> = Vec::new();
    let mut rounds_len = None;
    for path in inputs {
        let (header, rows) = read_csv(path)?;
        let col = |name: &str| -> Result<usize> {
            header
                .iter()
                .position(|h| h == name)
                .with_context(|| format!("{}: missing column {name}", path.display()))
        };
        let logs: Vec<RoundLog> = rows
            .iter()
            .map(|r| -> Result<RoundLog> {
                Ok(RoundLog {
                    round: r[col("round")?].parse()?,
                    delta: r[col("delta")?].parse()?,
                    accepted: r[col("accepted")?].parse()?,
                    noise_norm: r[col("noise_norm")?].parse()?,
                    provenance: Provenance::Learned,
                    delta_full: r[col("delta_full")?].parse()?,
                    clean_accuracy: r[col("clean_accuracy")?].parse()?,
                    fgsm_accuracy: r[col("fgsm_accuracy")?].parse()?,
                    match_rate: r[col("match_rate")?].parse()?,
                    wall_seconds: r[col("wall_seconds")?].parse()?,
                })
            })
            .collect::<Result<_>>()?;
        match rounds_len {
            None => rounds_len = Some(logs.len()),
            Some(n) if n != logs.len() => {
                bail!("{}: {} rounds, expected {n}", path.display(), logs.len())
            }
            _ => {}
        }
        per_file.push(finetune::track_trend(&logs));
    }

    let n_rounds = rounds_len.unwrap_or(0);
    let names: Vec<&str> = per_file[0].iter().map(|s| s.name).collect();
    let mut header = vec!["round".to_string()];
    for (i, name) in names.iter().enumerate() {
        let normalized = per_file.iter().all(|f| f[i].normalized);
        header.push(format!("{name}{}", if normalized { "" } else { "_raw" }));
    }
    let mut csv = CsvWriter::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for round in 0..n_rounds {
        let mut cells = vec![round.to_string()];
        for i in 0..names.len() {
            let mean: f64 =
                per_file.iter().map(|f| f[i].values[round]).sum::<f64>() / per_file.len() as f64;
            cells.push(format!("{mean}"));
        }
        csv.row(&cells);
    }
    csv.finish(&cfg.out_path("trend.csv")?, cfg.seed)?;
    println!("aggregated {} runs over {} rounds", per_file.len(), n_rounds);
    Ok(())
}
