//! Run configuration: a flat `key=value` config file merged with CLI
//! flags (flags win), plus the output-directory guard.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nsvit_core::tensor::GeluKind;
use nsvit_core::vit::ModelConfig;

use crate::dataset::DatasetFormat;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub dataset: Option<PathBuf>,
    pub format: DatasetFormat,
    pub eval_dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub force: bool,
    pub threads: usize,
    pub precision: String,
}

/// Optional overrides collected from flags, applied over file values,
/// applied over defaults.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct CommonArgs {
    /// Flat key=value config file; flags override its entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; every random stream derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads for independent evaluations (NSVIT_THREADS also
    /// works; 1 = fully sequential).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Compute precision; this build is f64-only.
    #[arg(long, global = true)]
    pub precision: Option<String>,
    /// Dataset file.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Dataset format: cifar10-binary | raw-tensor.
    #[arg(long, global = true)]
    pub format: Option<String>,
    /// Held-out dataset file (same format).
    #[arg(long, global = true)]
    pub eval_dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub image_size: Option<usize>,
    #[arg(long, global = true)]
    pub patch_size: Option<usize>,
    #[arg(long, global = true)]
    pub channels: Option<usize>,
    #[arg(long, global = true)]
    pub embed_dim: Option<usize>,
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    #[arg(long, global = true)]
    pub depth: Option<usize>,
    #[arg(long, global = true)]
    pub mlp_ratio: Option<usize>,
    #[arg(long, global = true)]
    pub num_classes: Option<usize>,
    /// GELU form: exact | tanh.
    #[arg(long, global = true)]
    pub gelu: Option<String>,
}

pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value, got {line:?}", path.display(), i + 1);
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

impl RunConfig {
    pub fn resolve(args: &CommonArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => parse_config_file(path)?,
            None => BTreeMap::new(),
        };
        let get_usize = |key: &str, flag: Option<usize>, default: usize| -> Result<usize> {
            if let Some(v) = flag {
                return Ok(v);
            }
            match file.get(key) {
                Some(v) => v.parse().with_context(|| format!("config key {key}")),
                None => Ok(default),
            }
        };
        let toy = ModelConfig::toy();
        let gelu_str = args
            .gelu
            .clone()
            .or_else(|| file.get("gelu").cloned())
            .unwrap_or_else(|| "exact".to_string());
        let gelu = match gelu_str.as_str() {
            "exact" => GeluKind::Exact,
            "tanh" => GeluKind::TanhApprox,
            other => bail!("unknown gelu form {other:?} (exact | tanh)"),
        };
        let model = ModelConfig {
            image_size: get_usize("image_size", args.image_size, toy.image_size)?,
            patch_size: get_usize("patch_size", args.patch_size, toy.patch_size)?,
            channels: get_usize("channels", args.channels, toy.channels)?,
            embed_dim: get_usize("embed_dim", args.embed_dim, toy.embed_dim)?,
            heads: get_usize("heads", args.heads, toy.heads)?,
            depth: get_usize("depth", args.depth, toy.depth)?,
            mlp_ratio: get_usize("mlp_ratio", args.mlp_ratio, toy.mlp_ratio)?,
            num_classes: get_usize("num_classes", args.num_classes, toy.num_classes)?,
            gelu,
        };
        model.validate().map_err(|e| anyhow::anyhow!("{e}"))?;

        let seed = match args.seed {
            Some(s) => s,
            None => match file.get("seed") {
                Some(v) => v.parse().context("config key seed")?,
                None => 0,
            },
        };
        let threads = match args.threads {
            Some(t) => t,
            None => match file.get("threads") {
                Some(v) => v.parse().context("config key threads")?,
                None => match std::env::var("NSVIT_THREADS") {
                    Ok(v) => v.parse().context("NSVIT_THREADS")?,
                    Err(_) => 1,
                },
            },
        };
        if threads == 0 {
            bail!("threads must be >= 1");
        }
        let precision = args
            .precision
            .clone()
            .or_else(|| file.get("precision").cloned())
            .unwrap_or_else(|| "f64".to_string());
        if precision != "f64" {
            bail!("precision {precision:?} not supported; this build computes in f64");
        }
        let format_str = args
            .format
            .clone()
            .or_else(|| file.get("format").cloned())
            .unwrap_or_else(|| "raw-tensor".to_string());
        let format: DatasetFormat = format_str.parse()?;
        let dataset = args.dataset.clone().or_else(|| file.get("dataset").map(PathBuf::from));
        let eval_dataset = args
            .eval_dataset
            .clone()
            .or_else(|| file.get("eval_dataset").map(PathBuf::from));
        let out = args
            .out
            .clone()
            .or_else(|| file.get("out").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(RunConfig {
            seed,
            model,
            dataset,
            format,
            eval_dataset,
            out,
            force: args.force,
            threads,
            precision,
        })
    }

    /// Path inside the output directory, refusing to overwrite unless
    /// `--force` was given. Creates the directory on first use.
    pub fn out_path(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(name);
        if path.exists() && !self.force {
            bail!("{} exists; pass --force to overwrite", path.display());
        }
        Ok(path)
    }

    pub fn require_dataset(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .context("no dataset given; pass --dataset (generate one with `nsvit gen-data`)")
    }
}
