//! Dataset file formats.
//!
//! `cifar10-binary` is the standard 3073-byte-record format: one label
//! byte followed by 3072 pixel bytes (channel-major 32x32 RGB); pixels
//! are scaled to `[0, 1]`.
//!
//! `raw-tensor` is this repo's container:
//!
//! ```text
//! magic   8 bytes  "NSVITDS1"
//! count   u32 LE
//! c,h,w   u32 LE each
//! pixels  count*c*h*w f32 LE, channel-major per image
//! labels  count u32 LE
//! ```

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nsvit_core::data::LabeledImages;

pub const DATASET_MAGIC: &[u8; 8] = b"NSVITDS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Cifar10Binary,
    RawTensor,
}

impl std::str::FromStr for DatasetFormat {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10-binary" => Ok(DatasetFormat::Cifar10Binary),
            "raw-tensor" => Ok(DatasetFormat::RawTensor),
            other => bail!("unknown dataset format {other:?} (cifar10-binary | raw-tensor)"),
        }
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<LabeledImages> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    match format {
        DatasetFormat::Cifar10Binary => parse_cifar10(&bytes),
        DatasetFormat::RawTensor => parse_raw_tensor(&bytes),
    }
    .with_context(|| format!("parsing {}", path.display()))
}

const CIFAR_RECORD: usize = 3073;

fn parse_cifar10(bytes: &[u8]) -> Result<LabeledImages> {
    if bytes.is_empty() {
        bail!("parse error at byte 0: empty file");
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = (bytes.len() / CIFAR_RECORD) * CIFAR_RECORD;
        bail!(
            "parse error at byte {offset}: truncated record ({} trailing bytes, need {})",
            bytes.len() - offset,
            CIFAR_RECORD
        );
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut data = LabeledImages::new(3, 32, 32);
    for r in 0..count {
        let rec = &bytes[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        let label = rec[0] as usize;
        if label > 9 {
            bail!("parse error at byte {}: label {label} out of range 0..=9", r * CIFAR_RECORD);
        }
        let image: Vec<f64> = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
        data.push(image, label).map_err(|e| anyhow!("{e}"))?;
    }
    Ok(data)
}

fn parse_raw_tensor(bytes: &[u8]) -> Result<LabeledImages> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != DATASET_MAGIC {
        bail!("parse error at byte 0: bad magic {magic:?}");
    }
    let count = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let pixel_count = channels * height * width;
    let mut data = LabeledImages::new(channels, height, width);
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let mut image = Vec::with_capacity(pixel_count);
        for _ in 0..pixel_count {
            image.push(r.f32()? as f64);
        }
        images.push(image);
    }
    for image in images {
        let label = r.u32()? as usize;
        data.push(image, label).map_err(|e| anyhow!("{e}"))?;
    }
    if r.pos != bytes.len() {
        bail!("parse error at byte {}: {} trailing bytes", r.pos, bytes.len() - r.pos);
    }
    Ok(data)
}

// Labels are stored after all pixel blocks; interleave on write accordingly.
pub fn write_raw_tensor(path: &Path, data: &LabeledImages) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(&(data.channels as u32).to_le_bytes());
    out.extend_from_slice(&(data.height as u32).to_le_bytes());
    out.extend_from_slice(&(data.width as u32).to_le_bytes());
    for image in &data.images {
        for &v in image {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for &label in &data.labels {
        out.extend_from_slice(&(label as u32).to_le_bytes());
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            bail!(
                "parse error at byte {}: need {n} bytes, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            );
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
