//! Versioned binary checkpoint container.
//!
//! ```text
//! magic    8 bytes  "NSVITCK1"
//! config   u32 LE byte length, then UTF-8 "key=value\n" lines
//! count    u32 LE number of tensor blocks
//! per tensor:
//!   name   u32 LE length + bytes
//!   dims   u32 LE ndims, then ndims u32 LE sizes
//!   data   product(dims) f32 LE values
//! ```
//!
//! Model weights and noise tensors share the container; the config block
//! distinguishes them via `kind`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use nsvit_core::noise::{NoiseVector, Provenance};
use nsvit_core::tensor::GeluKind;
use nsvit_core::vit::{ModelConfig, ViTParams};
use nsvit_core::Mat;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NSVITCK1";

pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let mut cfg = String::new();
        for (k, v) in &self.config {
            cfg.push_str(k);
            cfg.push('=');
            cfg.push_str(v);
            cfg.push('\n');
        }
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, mat) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(mat.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(mat.cols() as u32).to_le_bytes());
            for &v in mat.as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        fs::write(path, out).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&bytes).with_context(|| format!("parsing {}", path.display()))
    }

    fn parse(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                bail!("parse error at byte {}: need {n} bytes", *pos);
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let u32at = |pos: &mut usize| -> Result<u32> {
            let b = take(pos, 4)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };

        if take(&mut pos, 8)? != CHECKPOINT_MAGIC {
            bail!("parse error at byte 0: bad magic");
        }
        let cfg_len = u32at(&mut pos)? as usize;
        let cfg_str = std::str::from_utf8(take(&mut pos, cfg_len)?)
            .context("config block is not UTF-8")?;
        let mut config = BTreeMap::new();
        for line in cfg_str.lines() {
            if let Some((k, v)) = line.split_once('=') {
                config.insert(k.to_string(), v.to_string());
            }
        }
        let count = u32at(&mut pos)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32at(&mut pos)? as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .context("tensor name is not UTF-8")?
                .to_string();
            let ndims = u32at(&mut pos)? as usize;
            if ndims != 2 {
                bail!("tensor {name}: expected 2 dims, got {ndims}");
            }
            let rows = u32at(&mut pos)? as usize;
            let cols = u32at(&mut pos)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let b = take(&mut pos, 4)?;
                data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
            }
            tensors.push((name, Mat::from_vec(rows, cols, data).map_err(|e| anyhow::anyhow!("{e}"))?));
        }
        if pos != bytes.len() {
            bail!("parse error at byte {pos}: {} trailing bytes", bytes.len() - pos);
        }
        Ok(Checkpoint { config, tensors })
    }
}

fn model_config_entries(cfg: &ModelConfig) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    map.insert("kind".into(), "model".into());
    map.insert("version".into(), "1".into());
    map.insert("image_size".into(), cfg.image_size.to_string());
    map.insert("patch_size".into(), cfg.patch_size.to_string());
    map.insert("channels".into(), cfg.channels.to_string());
    map.insert("embed_dim".into(), cfg.embed_dim.to_string());
    map.insert("heads".into(), cfg.heads.to_string());
    map.insert("depth".into(), cfg.depth.to_string());
    map.insert("mlp_ratio".into(), cfg.mlp_ratio.to_string());
    map.insert("num_classes".into(), cfg.num_classes.to_string());
    map.insert(
        "gelu".into(),
        match cfg.gelu {
            GeluKind::Exact => "exact".into(),
            GeluKind::TanhApprox => "tanh".to_string(),
        },
    );
    map
}

fn parse_usize(config: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    config
        .get(key)
        .with_context(|| format!("checkpoint config missing {key}"))?
        .parse()
        .with_context(|| format!("checkpoint config key {key}"))
}

pub fn save_model(path: &Path, params: &ViTParams, seed: u64) -> Result<()> {
    let mut config = model_config_entries(&params.cfg);
    config.insert("seed".into(), seed.to_string());
    let tensors = params
        .tensors()
        .into_iter()
        .map(|(name, mat)| (name, mat.clone()))
        .collect();
    Checkpoint { config, tensors }.write(path)
}

pub fn load_model(path: &Path) -> Result<ViTParams> {
    let ck = Checkpoint::read(path)?;
    if ck.config.get("kind").map(String::as_str) != Some("model") {
        bail!("{} is not a model checkpoint", path.display());
    }
    let gelu = match ck.config.get("gelu").map(String::as_str) {
        Some("tanh") => GeluKind::TanhApprox,
        _ => GeluKind::Exact,
    };
    let cfg = ModelConfig {
        image_size: parse_usize(&ck.config, "image_size")?,
        patch_size: parse_usize(&ck.config, "patch_size")?,
        channels: parse_usize(&ck.config, "channels")?,
        embed_dim: parse_usize(&ck.config, "embed_dim")?,
        heads: parse_usize(&ck.config, "heads")?,
        depth: parse_usize(&ck.config, "depth")?,
        mlp_ratio: parse_usize(&ck.config, "mlp_ratio")?,
        num_classes: parse_usize(&ck.config, "num_classes")?,
        gelu,
    };
    // start from a deterministic skeleton, then overwrite every tensor
    let subs = nsvit_core::rng::Substreams::new(0);
    let mut params =
        ViTParams::init(cfg, &mut subs.stream("model-init")).map_err(|e| anyhow::anyhow!("{e}"))?;
    let by_name: BTreeMap<&str, &Mat> =
        ck.tensors.iter().map(|(n, m)| (n.as_str(), m)).collect();
    for (name, slot) in params.tensors_mut() {
        let src = by_name
            .get(name.as_str())
            .with_context(|| format!("checkpoint missing tensor {name}"))?;
        if src.dims() != slot.dims() {
            bail!(
                "tensor {name}: checkpoint has {:?}, model needs {:?}",
                src.dims(),
                slot.dims()
            );
        }
        slot.as_mut_slice().copy_from_slice(src.as_slice());
    }
    Ok(params)
}

pub fn save_noise(path: &Path, noise: &NoiseVector, seed: u64) -> Result<()> {
    let mut config = BTreeMap::new();
    config.insert("kind".to_string(), "noise".to_string());
    config.insert("version".to_string(), "1".to_string());
    config.insert("provenance".to_string(), noise.provenance.as_str().to_string());
    config.insert("seed".to_string(), seed.to_string());
    let tensors = vec![("values".to_string(), noise.values.clone())];
    Checkpoint { config, tensors }.write(path)
}

pub fn load_noise(path: &Path) -> Result<NoiseVector> {
    let ck = Checkpoint::read(path)?;
    if ck.config.get("kind").map(String::as_str) != Some("noise") {
        bail!("{} is not a noise checkpoint", path.display());
    }
    let provenance = match ck.config.get("provenance").map(String::as_str) {
        Some("learned") => Provenance::Learned,
        Some("random") => Provenance::Random,
        Some("permuted") => Provenance::Permuted,
        Some("constructed") => Provenance::Constructed,
        other => bail!("unknown provenance {other:?}"),
    };
    let values = ck
        .tensors
        .into_iter()
        .find(|(n, _)| n == "values")
        .context("noise checkpoint missing values tensor")?
        .1;
    Ok(NoiseVector::new(values, provenance))
}
