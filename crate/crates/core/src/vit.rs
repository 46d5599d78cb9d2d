//! The toy vision transformer: patch embedding, pre-norm encoder, linear
//! classifier, and a plain supervised trainer.
//!
//! Patches are flattened channel-major (`[channel][row][col]` within each
//! patch) and patches are enumerated row-major over the patch grid; the
//! patch nullspace machinery depends on this order, so it is fixed here
//! and nowhere else.
//!
//! Blocks are pre-norm (`LN -> MHSA -> residual; LN -> MLP -> residual`)
//! and the classifier reads the raw cls-token state after the last block,
//! so a depth-0 model maps the cls token (plus its position embedding)
//! straight to the classifier.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::data::{BatchSampler, LabeledImages};
use crate::error::{Error, Result};
use crate::fmath;
use crate::mat::Mat;
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::rng::normal;
use crate::tensor::{GeluKind, Tape, TensorId};

pub const LN_EPS: f64 = 1e-6;

/// Architectural hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// GELU formula; the exact erf form unless a caller explicitly opts
    /// into the tanh approximation.
    pub gelu: GeluKind,
}

impl ModelConfig {
    /// Desk-scale default: patch dimension 192 over embedding width 64
    /// guarantees a 128-dimensional patch nullspace, and the model trains
    /// in minutes.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            heads: 4,
            depth: 4,
            mlp_ratio: 4,
            num_classes: 10,
            gelu: GeluKind::Exact,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Per-head value width; equal to the head width here.
    pub fn value_dim(&self) -> usize {
        self.head_dim()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened patch length `p^2 * c`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Tokens per image including the cls token.
    pub fn tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn pixel_count(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Usage(alloc::format!(
                "image size {} not divisible by patch size {}",
                self.image_size,
                self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Usage(alloc::format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim,
                self.heads
            )));
        }
        if self.depth == 0 && self.embed_dim == 0 {
            return Err(Error::Usage(String::from("degenerate config")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    /// Per-head query/key/value projections, each `d x d_k`.
    pub q: Vec<Mat>,
    pub k: Vec<Mat>,
    pub v: Vec<Mat>,
    pub proj: Mat,
    pub proj_bias: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
    pub mlp_w1: Mat,
    pub mlp_b1: Mat,
    pub mlp_w2: Mat,
    pub mlp_b2: Mat,
}

/// All weights of the model.
#[derive(Debug, Clone)]
pub struct ViTParams {
    pub cfg: ModelConfig,
    /// Patch embedding matrix, `(p^2 c) x d`.
    pub patch_weight: Mat,
    pub patch_bias: Mat,
    pub cls_token: Mat,
    /// Learned position embeddings, `(1 + n_patches) x d`.
    pub pos_embed: Mat,
    pub layers: Vec<LayerParams>,
    /// Linear classifier, `d x num_classes`.
    pub classifier: Mat,
}

impl ViTParams {
    pub fn init(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let dk = cfg.head_dim();
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            let data: Vec<f64> = (0..rows * cols).map(|_| std * normal(rng)).collect();
            Mat::from_vec(rows, cols, data).expect("sized to match")
        };
        let layers = (0..cfg.depth)
            .map(|_| LayerParams {
                ln1_gain: ones(1, d),
                ln1_bias: Mat::zeros(1, d),
                q: (0..cfg.heads).map(|_| gauss(d, dk, 0.02)).collect(),
                k: (0..cfg.heads).map(|_| gauss(d, dk, 0.02)).collect(),
                v: (0..cfg.heads).map(|_| gauss(d, dk, 0.02)).collect(),
                proj: gauss(d, d, 0.02),
                proj_bias: Mat::zeros(1, d),
                ln2_gain: ones(1, d),
                ln2_bias: Mat::zeros(1, d),
                mlp_w1: gauss(d, cfg.mlp_ratio * d, 0.02),
                mlp_b1: Mat::zeros(1, cfg.mlp_ratio * d),
                mlp_w2: gauss(cfg.mlp_ratio * d, d, 0.02),
                mlp_b2: Mat::zeros(1, d),
            })
            .collect();
        Ok(ViTParams {
            cfg,
            patch_weight: gauss(cfg.patch_dim(), d, 0.02),
            patch_bias: Mat::zeros(1, d),
            cls_token: gauss(1, d, 0.02),
            pos_embed: gauss(cfg.tokens(), d, 0.02),
            layers,
            classifier: gauss(d, cfg.num_classes, 0.02),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.all_finite())
    }

    /// All parameter tensors with stable names, in a fixed order shared by
    /// the optimizer, the autodiff binding and the checkpoint format.
    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![
            (String::from("patch_weight"), &self.patch_weight),
            (String::from("patch_bias"), &self.patch_bias),
            (String::from("cls_token"), &self.cls_token),
            (String::from("pos_embed"), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((alloc::format!("layer{i}.ln1_gain"), &l.ln1_gain));
            out.push((alloc::format!("layer{i}.ln1_bias"), &l.ln1_bias));
            for (h, m) in l.q.iter().enumerate() {
                out.push((alloc::format!("layer{i}.q{h}"), m));
            }
            for (h, m) in l.k.iter().enumerate() {
                out.push((alloc::format!("layer{i}.k{h}"), m));
            }
            for (h, m) in l.v.iter().enumerate() {
                out.push((alloc::format!("layer{i}.v{h}"), m));
            }
            out.push((alloc::format!("layer{i}.proj"), &l.proj));
            out.push((alloc::format!("layer{i}.proj_bias"), &l.proj_bias));
            out.push((alloc::format!("layer{i}.ln2_gain"), &l.ln2_gain));
            out.push((alloc::format!("layer{i}.ln2_bias"), &l.ln2_bias));
            out.push((alloc::format!("layer{i}.mlp_w1"), &l.mlp_w1));
            out.push((alloc::format!("layer{i}.mlp_b1"), &l.mlp_b1));
            out.push((alloc::format!("layer{i}.mlp_w2"), &l.mlp_w2));
            out.push((alloc::format!("layer{i}.mlp_b2"), &l.mlp_b2));
        }
        out.push((String::from("classifier"), &self.classifier));
        out
    }

    /// Mutable view in the same order as [`ViTParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = vec![
            (String::from("patch_weight"), &mut self.patch_weight),
            (String::from("patch_bias"), &mut self.patch_bias),
            (String::from("cls_token"), &mut self.cls_token),
            (String::from("pos_embed"), &mut self.pos_embed),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((alloc::format!("layer{i}.ln1_gain"), &mut l.ln1_gain));
            out.push((alloc::format!("layer{i}.ln1_bias"), &mut l.ln1_bias));
            for (h, m) in l.q.iter_mut().enumerate() {
                out.push((alloc::format!("layer{i}.q{h}"), m));
            }
            for (h, m) in l.k.iter_mut().enumerate() {
                out.push((alloc::format!("layer{i}.k{h}"), m));
            }
            for (h, m) in l.v.iter_mut().enumerate() {
                out.push((alloc::format!("layer{i}.v{h}"), m));
            }
            out.push((alloc::format!("layer{i}.proj"), &mut l.proj));
            out.push((alloc::format!("layer{i}.proj_bias"), &mut l.proj_bias));
            out.push((alloc::format!("layer{i}.ln2_gain"), &mut l.ln2_gain));
            out.push((alloc::format!("layer{i}.ln2_bias"), &mut l.ln2_bias));
            out.push((alloc::format!("layer{i}.mlp_w1"), &mut l.mlp_w1));
            out.push((alloc::format!("layer{i}.mlp_b1"), &mut l.mlp_b1));
            out.push((alloc::format!("layer{i}.mlp_w2"), &mut l.mlp_w2));
            out.push((alloc::format!("layer{i}.mlp_b2"), &mut l.mlp_b2));
        }
        out.push((String::from("classifier"), &mut self.classifier));
        out
    }
}

fn ones(rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, vec![1.0; rows * cols]).expect("sized to match")
}

// ── Patch layout ────────────────────────────────────────────────────

/// Splits an image into non-overlapping patches, one flattened patch per
/// row. Channel-major within the patch, patches row-major over the grid.
pub fn patchify(cfg: &ModelConfig, image: &[f64]) -> Result<Mat> {
    if image.len() != cfg.pixel_count() {
        return Err(Error::Usage(alloc::format!(
            "image has {} values, expected {}",
            image.len(),
            cfg.pixel_count()
        )));
    }
    let p = cfg.patch_size;
    let s = cfg.image_size;
    let g = cfg.grid();
    let mut out = Mat::zeros(cfg.n_patches(), cfg.patch_dim());
    for py in 0..g {
        for px in 0..g {
            let row = out.row_mut(py * g + px);
            for c in 0..cfg.channels {
                for y in 0..p {
                    for x in 0..p {
                        row[c * p * p + y * p + x] =
                            image[c * s * s + (py * p + y) * s + (px * p + x)];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`]; scatters patch rows back to image layout.
pub fn unpatchify(cfg: &ModelConfig, patches: &Mat) -> Result<Vec<f64>> {
    if patches.dims() != (cfg.n_patches(), cfg.patch_dim()) {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            lhs: (cfg.n_patches(), cfg.patch_dim()),
            rhs: patches.dims(),
        });
    }
    let p = cfg.patch_size;
    let s = cfg.image_size;
    let g = cfg.grid();
    let mut image = vec![0.0; cfg.pixel_count()];
    for py in 0..g {
        for px in 0..g {
            let row = patches.row(py * g + px);
            for c in 0..cfg.channels {
                for y in 0..p {
                    for x in 0..p {
                        image[c * s * s + (py * p + y) * s + (px * p + x)] =
                            row[c * p * p + y * p + x];
                    }
                }
            }
        }
    }
    Ok(image)
}

/// Patch embedding `u -> u W_e + b` applied to every patch of the image.
pub fn patch_embed(params: &ViTParams, image: &[f64]) -> Result<Mat> {
    let patches = patchify(&params.cfg, image)?;
    let mut tokens = patches.matmul(&params.patch_weight)?;
    for i in 0..tokens.rows() {
        let row = tokens.row_mut(i);
        for (t, &b) in row.iter_mut().zip(params.patch_bias.as_slice()) {
            *t += b;
        }
    }
    Ok(tokens)
}

/// One attention head: `Softmax(X Q K^T X^T / sqrt(d_k)) X V`.
pub fn attention_head(x: &Mat, q: &Mat, k: &Mat, v: &Mat) -> Result<Mat> {
    let dk = q.cols();
    let xq = x.matmul(q)?;
    let xk = x.matmul(k)?;
    let scores = xq.matmul(&xk.transpose())?.scale(1.0 / fmath::sqrt(dk as f64));
    let n = scores.rows();
    let mut attn = Mat::zeros(n, n);
    for i in 0..n {
        crate::tensor::softmax_row(scores.row(i), attn.row_mut(i));
    }
    let xv = x.matmul(v)?;
    attn.matmul(&xv)
}

// ── Autodiff forward ────────────────────────────────────────────────

pub struct BoundLayer {
    pub ln1_gain: TensorId,
    pub ln1_bias: TensorId,
    pub q: Vec<TensorId>,
    pub k: Vec<TensorId>,
    pub v: Vec<TensorId>,
    pub proj: TensorId,
    pub proj_bias: TensorId,
    pub ln2_gain: TensorId,
    pub ln2_bias: TensorId,
    pub mlp_w1: TensorId,
    pub mlp_b1: TensorId,
    pub mlp_w2: TensorId,
    pub mlp_b2: TensorId,
}

/// Parameter leaves on a tape, in the same order as [`ViTParams::tensors`].
pub struct BoundVit {
    pub patch_weight: TensorId,
    pub patch_bias: TensorId,
    pub cls_token: TensorId,
    pub pos_embed: TensorId,
    pub layers: Vec<BoundLayer>,
    pub classifier: TensorId,
    ids: Vec<TensorId>,
}

impl BoundVit {
    /// Leaf ids aligned with [`ViTParams::tensors`].
    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

pub fn bind(tape: &mut Tape, params: &ViTParams, trainable: bool) -> BoundVit {
    let mut ids = Vec::new();
    let mut leaf = |tape: &mut Tape, m: &Mat| {
        let id = tape.leaf(m, trainable);
        ids.push(id);
        id
    };
    let patch_weight = leaf(tape, &params.patch_weight);
    let patch_bias = leaf(tape, &params.patch_bias);
    let cls_token = leaf(tape, &params.cls_token);
    let pos_embed = leaf(tape, &params.pos_embed);
    let layers = params
        .layers
        .iter()
        .map(|l| {
            let ln1_gain = leaf(tape, &l.ln1_gain);
            let ln1_bias = leaf(tape, &l.ln1_bias);
            let q = l.q.iter().map(|m| leaf(tape, m)).collect();
            let k = l.k.iter().map(|m| leaf(tape, m)).collect();
            let v = l.v.iter().map(|m| leaf(tape, m)).collect();
            let proj = leaf(tape, &l.proj);
            let proj_bias = leaf(tape, &l.proj_bias);
            let ln2_gain = leaf(tape, &l.ln2_gain);
            let ln2_bias = leaf(tape, &l.ln2_bias);
            let mlp_w1 = leaf(tape, &l.mlp_w1);
            let mlp_b1 = leaf(tape, &l.mlp_b1);
            let mlp_w2 = leaf(tape, &l.mlp_w2);
            let mlp_b2 = leaf(tape, &l.mlp_b2);
            BoundLayer {
                ln1_gain,
                ln1_bias,
                q,
                k,
                v,
                proj,
                proj_bias,
                ln2_gain,
                ln2_bias,
                mlp_w1,
                mlp_b1,
                mlp_w2,
                mlp_b2,
            }
        })
        .collect();
    let classifier = leaf(tape, &params.classifier);
    BoundVit { patch_weight, patch_bias, cls_token, pos_embed, layers, classifier, ids }
}

fn encoder_block(
    tape: &mut Tape,
    layer: &BoundLayer,
    cfg: &ModelConfig,
    x: TensorId,
    batch: usize,
) -> Result<TensorId> {
    let t = cfg.tokens();
    let scale = 1.0 / fmath::sqrt(cfg.head_dim() as f64);

    let h = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias, LN_EPS)?;
    let qs: Vec<TensorId> =
        layer.q.iter().map(|&w| tape.matmul(h, w)).collect::<Result<_>>()?;
    let ks: Vec<TensorId> =
        layer.k.iter().map(|&w| tape.matmul(h, w)).collect::<Result<_>>()?;
    let vs: Vec<TensorId> =
        layer.v.iter().map(|&w| tape.matmul(h, w)).collect::<Result<_>>()?;

    let mut per_image = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut head_outs = Vec::with_capacity(cfg.heads);
        for i in 0..cfg.heads {
            let q = tape.slice_rows(qs[i], b * t, t)?;
            let k = tape.slice_rows(ks[i], b * t, t)?;
            let v = tape.slice_rows(vs[i], b * t, t)?;
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt)?;
            let scaled = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scaled)?;
            head_outs.push(tape.matmul(attn, v)?);
        }
        per_image.push(tape.concat_cols(&head_outs)?);
    }
    let merged = tape.concat_rows(&per_image)?;
    let projected = tape.matmul(merged, layer.proj)?;
    let projected = tape.add_row(projected, layer.proj_bias)?;
    let x = tape.add(x, projected)?;

    let h2 = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias, LN_EPS)?;
    let m1 = tape.matmul(h2, layer.mlp_w1)?;
    let m1 = tape.add_row(m1, layer.mlp_b1)?;
    let act = tape.gelu(m1, cfg.gelu);
    let m2 = tape.matmul(act, layer.mlp_w2)?;
    let m2 = tape.add_row(m2, layer.mlp_b2)?;
    tape.add(x, m2)
}

/// Runs the encoder over a stack of patch tokens (`(batch * n_patches) x d`,
/// images concatenated) and returns the `batch x d` matrix of final cls
/// states. `noise` (`n_patches x d`) is added to every image's tokens
/// before the cls token is prepended; the cls token receives no noise.
pub fn cls_states_from_tokens(
    tape: &mut Tape,
    bound: &BoundVit,
    cfg: &ModelConfig,
    tokens: TensorId,
    batch: usize,
    noise: Option<TensorId>,
) -> Result<TensorId> {
    let n = cfg.n_patches();
    let (rows, cols) = tape.dims(tokens);
    if rows != batch * n || cols != cfg.embed_dim {
        return Err(Error::ShapeMismatch {
            op: "cls_states_from_tokens",
            lhs: (batch * n, cfg.embed_dim),
            rhs: (rows, cols),
        });
    }
    let u = match noise {
        Some(v) => tape.add_tiled(tokens, v)?,
        None => tokens,
    };
    let x = tape.prepend_row_per_block(u, bound.cls_token, n)?;
    let mut x = tape.add_tiled(x, bound.pos_embed)?;
    for layer in &bound.layers {
        x = encoder_block(tape, layer, cfg, x, batch)?;
    }
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * cfg.tokens()).collect();
    tape.gather_rows(x, &cls_rows)
}

/// Full forward from raw images to logits on one tape.
pub struct BatchForward {
    pub bound: BoundVit,
    /// Stacked patchified images, `(batch * n_patches) x (p^2 c)`.
    pub patches: TensorId,
    pub noise: Option<TensorId>,
    pub cls: TensorId,
    pub logits: TensorId,
}

pub struct ForwardOptions<'a> {
    pub trainable: bool,
    pub patches_require_grad: bool,
    /// Token-space noise tensor (`n_patches x d`) and whether it needs a
    /// gradient.
    pub noise: Option<(&'a Mat, bool)>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        ForwardOptions { trainable: false, patches_require_grad: false, noise: None }
    }
}

pub fn batch_forward(
    tape: &mut Tape,
    params: &ViTParams,
    images: &[&[f64]],
    opts: &ForwardOptions,
) -> Result<BatchForward> {
    let cfg = &params.cfg;
    let batch = images.len();
    if batch == 0 {
        return Err(Error::EmptyMatrix { op: "batch_forward" });
    }
    let mut stacked = Vec::with_capacity(batch * cfg.n_patches() * cfg.patch_dim());
    for image in images {
        stacked.extend_from_slice(patchify(cfg, image)?.as_slice());
    }
    let bound = bind(tape, params, opts.trainable);
    let patches = tape.leaf_vec(
        batch * cfg.n_patches(),
        cfg.patch_dim(),
        stacked,
        opts.patches_require_grad,
    )?;
    let embedded = tape.matmul(patches, bound.patch_weight)?;
    let tokens = tape.add_row(embedded, bound.patch_bias)?;
    let noise = match opts.noise {
        Some((v, requires)) => {
            if v.dims() != (cfg.n_patches(), cfg.embed_dim) {
                return Err(Error::ShapeMismatch {
                    op: "batch_forward noise",
                    lhs: (cfg.n_patches(), cfg.embed_dim),
                    rhs: v.dims(),
                });
            }
            Some(tape.leaf(v, requires))
        }
        None => None,
    };
    let cls = cls_states_from_tokens(tape, &bound, cfg, tokens, batch, noise)?;
    let logits = tape.matmul(cls, bound.classifier)?;
    Ok(BatchForward { bound, patches, noise, cls, logits })
}

/// Logits for a batch, tokens supplied directly (used when the patch
/// embedding output is cached while parameters are frozen).
pub fn logits_from_token_stack(
    params: &ViTParams,
    token_stack: &Mat,
    batch: usize,
    noise: Option<&Mat>,
) -> Result<Mat> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false);
    let tokens = tape.leaf(token_stack, false);
    let noise_id = match noise {
        Some(v) => Some(tape.leaf(v, false)),
        None => None,
    };
    let cls = cls_states_from_tokens(&mut tape, &bound, &params.cfg, tokens, batch, noise_id)?;
    let logits = tape.matmul(cls, bound.classifier)?;
    Ok(tape.to_mat(logits))
}

// ── Plain evaluation entry points ───────────────────────────────────

/// Encoder pass for one image's tokens: returns all final token states
/// and the cls representation.
pub fn encoder_forward(params: &ViTParams, tokens: &Mat) -> Result<(Mat, Vec<f64>)> {
    let cfg = &params.cfg;
    if tokens.dims() != (cfg.n_patches(), cfg.embed_dim) {
        return Err(Error::ShapeMismatch {
            op: "encoder_forward",
            lhs: (cfg.n_patches(), cfg.embed_dim),
            rhs: tokens.dims(),
        });
    }
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false);
    let t = tape.leaf(tokens, false);
    let u = tape.prepend_row_per_block(t, bound.cls_token, cfg.n_patches())?;
    let mut x = tape.add_tiled(u, bound.pos_embed)?;
    for layer in &bound.layers {
        x = encoder_block(&mut tape, layer, cfg, x, 1)?;
    }
    let states = tape.to_mat(x);
    let cls = states.row(0).to_vec();
    Ok((states, cls))
}

/// Class scores for one image.
pub fn logits(params: &ViTParams, image: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let fwd = batch_forward(&mut tape, params, &[image], &ForwardOptions::default())?;
    Ok(tape.value(fwd.logits).to_vec())
}

/// Class scores for many images (single tape).
pub fn batch_logits(params: &ViTParams, images: &[&[f64]], noise: Option<&Mat>) -> Result<Mat> {
    let mut tape = Tape::new();
    let opts = ForwardOptions { noise: noise.map(|v| (v, false)), ..Default::default() };
    let fwd = batch_forward(&mut tape, params, images, &opts)?;
    Ok(tape.to_mat(fwd.logits))
}

/// Argmax class, ties broken toward the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &ViTParams, image: &[f64]) -> Result<usize> {
    Ok(argmax(&logits(params, image)?))
}

/// Fraction of images whose prediction matches the label.
pub fn accuracy(params: &ViTParams, data: &LabeledImages) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in chunked_indices(data.len(), 32) {
        let images: Vec<&[f64]> = chunk.iter().map(|&i| data.images[i].as_slice()).collect();
        let logits = batch_logits(params, &images, None)?;
        for (pos, &i) in chunk.iter().enumerate() {
            if argmax(logits.row(pos)) == data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

pub(crate) fn chunked_indices(n: usize, chunk: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n.div_ceil(chunk)).map(move |c| {
        let start = c * chunk;
        (start..(start + chunk).min(n)).collect()
    })
}

// ── Supervised training ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Record a curve point every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 300, batch: 64, lr: 1e-3, weight_decay: 0.01, log_every: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub batch_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub final_loss: f64,
}

/// Cross-entropy training with AdamW and a cosine schedule. Deterministic
/// given the RNG stream; mutates `params` in place.
pub fn train_supervised(
    params: &mut ViTParams,
    data: &LabeledImages,
    cfg: &TrainConfig,
    rng: ChaCha8Rng,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyMatrix { op: "train_supervised" });
    }
    let sizes: Vec<usize> = params.tensors().iter().map(|(_, m)| m.len()).collect();
    let mut opt = AdamW::new(
        AdamWConfig::new(cfg.lr, Schedule::Cosine { total_steps: cfg.steps })
            .with_weight_decay(cfg.weight_decay),
        &sizes,
    );
    let mut sampler = BatchSampler::new(data.len(), cfg.batch, rng);
    let mut curve = Vec::new();
    let mut last_loss = f64::NAN;

    for step in 0..cfg.steps {
        let batch_idx = sampler.next_batch();
        let images: Vec<&[f64]> = batch_idx.iter().map(|&i| data.images[i].as_slice()).collect();
        let labels: Vec<usize> = batch_idx.iter().map(|&i| data.labels[i]).collect();

        let mut tape = Tape::new();
        let opts = ForwardOptions { trainable: true, ..Default::default() };
        let fwd = batch_forward(&mut tape, params, &images, &opts)?;
        let loss = tape.cross_entropy(fwd.logits, &labels)?;
        let loss_val = tape.item(loss);
        if !loss_val.is_finite() {
            return Err(Error::Diverged { step });
        }
        tape.backward(loss)?;

        if step % cfg.log_every == 0 {
            let mut correct = 0usize;
            for (pos, &label) in labels.iter().enumerate() {
                let row = &tape.value(fwd.logits)[pos * params.cfg.num_classes
                    ..(pos + 1) * params.cfg.num_classes];
                if argmax(row) == label {
                    correct += 1;
                }
            }
            curve.push(CurvePoint {
                step,
                loss: loss_val,
                batch_accuracy: correct as f64 / labels.len() as f64,
            });
        }

        let ids = fwd.bound.ids().to_vec();
        let grads: Vec<&[f64]> = ids
            .iter()
            .map(|&id| tape.grad(id).expect("trainable leaves receive gradients"))
            .collect();
        let mut tensors = params.tensors_mut();
        let mut bufs: Vec<&mut [f64]> =
            tensors.iter_mut().map(|(_, m)| m.as_mut_slice()).collect();
        opt.step(&mut bufs, &grads);
        last_loss = loss_val;
    }
    Ok(TrainReport { curve, final_loss: last_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Substreams;
    use alloc::vec;

    fn tiny_cfg() -> ModelConfig {
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

    fn tiny_params(seed: u64) -> ViTParams {
        let subs = Substreams::new(seed);
        ViTParams::init(tiny_cfg(), &mut subs.stream("model-init")).unwrap()
    }

    fn random_image(cfg: &ModelConfig, seed: u64) -> Vec<f64> {
        let subs = Substreams::new(seed);
        let mut rng = subs.stream("image");
        (0..cfg.pixel_count()).map(|_| normal(&mut rng)).collect()
    }

    #[test]
    fn patchify_roundtrip() {
        let cfg = tiny_cfg();
        let image = random_image(&cfg, 3);
        let patches = patchify(&cfg, &image).unwrap();
        let back = unpatchify(&cfg, &patches).unwrap();
        assert_eq!(image, back);
    }

    #[test]
    fn patch_embed_zero_image_zero_bias() {
        let mut params = tiny_params(1);
        params.patch_bias = Mat::zeros(1, params.cfg.embed_dim);
        let image = vec![0.0; params.cfg.pixel_count()];
        let tokens = patch_embed(&params, &image).unwrap();
        assert!(tokens.max_abs() == 0.0);
    }

    #[test]
    fn patch_embed_basis_probe() {
        // single-patch config: image equal to basis row k selects row k of W_e
        let cfg = ModelConfig { image_size: 4, patch_size: 4, ..tiny_cfg() };
        let subs = Substreams::new(2);
        let params = ViTParams::init(cfg, &mut subs.stream("model-init")).unwrap();
        let k = 7;
        let mut image = vec![0.0; cfg.pixel_count()];
        // basis vector k in flattened patch order is just pixel k in
        // channel-major layout, which for a single patch coincides
        image[k] = 1.0;
        let tokens = patch_embed(&params, &image).unwrap();
        let mut expect = params.patch_weight.row(k).to_vec();
        for (e, &b) in expect.iter_mut().zip(params.patch_bias.as_slice()) {
            *e += b;
        }
        for (t, e) in tokens.row(0).iter().zip(&expect) {
            assert!((t - e).abs() < 1e-15);
        }
    }

    #[test]
    fn patch_embed_matches_loop_oracle() {
        let params = tiny_params(5);
        let cfg = &params.cfg;
        let image = random_image(cfg, 6);
        let tokens = patch_embed(&params, &image).unwrap();

        // explicit per-patch loop oracle
        let p = cfg.patch_size;
        let s = cfg.image_size;
        let g = cfg.grid();
        for py in 0..g {
            for px in 0..g {
                for j in 0..cfg.embed_dim {
                    let mut acc = params.patch_bias.at(0, j);
                    for c in 0..cfg.channels {
                        for y in 0..p {
                            for x in 0..p {
                                let pix = image[c * s * s + (py * p + y) * s + (px * p + x)];
                                acc += pix * params.patch_weight.at(c * p * p + y * p + x, j);
                            }
                        }
                    }
                    let got = tokens.at(py * g + px, j);
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn patch_embed_is_affine() {
        let params = tiny_params(7);
        let cfg = &params.cfg;
        let u = random_image(cfg, 8);
        let v = random_image(cfg, 9);
        let w = random_image(cfg, 10);
        let sum_uv: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
        let sum_wv: Vec<f64> = w.iter().zip(&v).map(|(a, b)| a + b).collect();
        // patch_embed(x + v) - patch_embed(x) must not depend on x
        let d1 = patch_embed(&params, &sum_uv)
            .unwrap()
            .sub(&patch_embed(&params, &u).unwrap())
            .unwrap();
        let d2 = patch_embed(&params, &sum_wv)
            .unwrap()
            .sub(&patch_embed(&params, &w).unwrap())
            .unwrap();
        assert!(d1.sub(&d2).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let subs = Substreams::new(11);
        let mut rng = subs.stream("attn");
        let d = 6;
        let dk = 3;
        let rand_mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            Mat::from_vec(r, c, (0..r * c).map(|_| normal(rng)).collect()).unwrap()
        };
        let x = rand_mat(&mut rng, 1, d);
        let q = rand_mat(&mut rng, d, dk);
        let k = rand_mat(&mut rng, d, dk);
        let v = rand_mat(&mut rng, d, dk);
        let out = attention_head(&x, &q, &k, &v).unwrap();
        let expect = x.matmul(&v).unwrap();
        assert!(out.sub(&expect).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn zero_values_give_zero_attention_output() {
        let subs = Substreams::new(12);
        let mut rng = subs.stream("attn");
        let rand_mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            Mat::from_vec(r, c, (0..r * c).map(|_| normal(rng)).collect()).unwrap()
        };
        let x = rand_mat(&mut rng, 4, 6);
        let q = rand_mat(&mut rng, 6, 3);
        let k = rand_mat(&mut rng, 6, 3);
        let out = attention_head(&x, &q, &k, &Mat::zeros(6, 3)).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn attention_head_matches_loop_oracle() {
        let subs = Substreams::new(13);
        let mut rng = subs.stream("attn");
        let (n, d, dk) = (4, 6, 3);
        let rand_mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            Mat::from_vec(r, c, (0..r * c).map(|_| normal(rng)).collect()).unwrap()
        };
        let x = rand_mat(&mut rng, n, d);
        let q = rand_mat(&mut rng, d, dk);
        let k = rand_mat(&mut rng, d, dk);
        let v = rand_mat(&mut rng, d, dk);
        let got = attention_head(&x, &q, &k, &v).unwrap();

        // explicit per-pair dot products
        let xq = x.matmul(&q).unwrap();
        let xk = x.matmul(&k).unwrap();
        let xv = x.matmul(&v).unwrap();
        for i in 0..n {
            let mut weights = vec![0.0; n];
            for j in 0..n {
                let mut dot = 0.0;
                for a in 0..dk {
                    dot += xq.at(i, a) * xk.at(j, a);
                }
                weights[j] = dot / fmath::sqrt(dk as f64);
            }
            let max = weights.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = weights.iter().map(|&w| fmath::exp(w - max)).collect();
            let sum: f64 = exps.iter().sum();
            for b in 0..dk {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += exps[j] / sum * xv.at(j, b);
                }
                assert!((got.at(i, b) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depth_zero_cls_state_is_cls_plus_position() {
        let cfg = ModelConfig { depth: 0, ..tiny_cfg() };
        let subs = Substreams::new(14);
        let params = ViTParams::init(cfg, &mut subs.stream("model-init")).unwrap();
        let image = random_image(&cfg, 15);
        let tokens = patch_embed(&params, &image).unwrap();
        let (_, cls) = encoder_forward(&params, &tokens).unwrap();
        for (j, &c) in cls.iter().enumerate() {
            let expect = params.cls_token.at(0, j) + params.pos_embed.at(0, j);
            assert!((c - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn token_permutation_with_positions_leaves_cls_unchanged() {
        let params = tiny_params(16);
        let cfg = &params.cfg;
        let image = random_image(cfg, 17);
        let tokens = patch_embed(&params, &image).unwrap();
        let (_, cls) = encoder_forward(&params, &tokens).unwrap();

        // swap patch tokens 0 and 2 together with their position embeddings
        let mut permuted = params.clone();
        let mut tok2 = tokens.clone();
        swap_rows(&mut tok2, 0, 2);
        swap_rows(&mut permuted.pos_embed, 1, 3); // +1 for the cls slot
        let (_, cls2) = encoder_forward(&permuted, &tok2).unwrap();
        for (a, b) in cls.iter().zip(&cls2) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    fn swap_rows(m: &mut Mat, i: usize, j: usize) {
        for c in 0..m.cols() {
            let tmp = m.at(i, c);
            m.set(i, c, m.at(j, c));
            m.set(j, c, tmp);
        }
    }

    #[test]
    fn zero_classifier_zero_logits() {
        let mut params = tiny_params(18);
        params.classifier = Mat::zeros(params.cfg.embed_dim, params.cfg.num_classes);
        let image = random_image(&params.cfg, 19);
        let z = logits(&params, &image).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_image_and_batched_paths_agree() {
        let params = tiny_params(20);
        let images: Vec<Vec<f64>> =
            (0..5).map(|i| random_image(&params.cfg, 30 + i)).collect();
        let refs: Vec<&[f64]> = images.iter().map(|v| v.as_slice()).collect();
        let batched = batch_logits(&params, &refs, None).unwrap();
        for (i, image) in images.iter().enumerate() {
            let single = logits(&params, image).unwrap();
            for (a, b) in single.iter().zip(batched.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn memorizes_single_sample() {
        let mut params = tiny_params(21);
        let mut data = LabeledImages::new(3, 8, 8);
        data.push(random_image(&params.cfg, 22), 2).unwrap();
        let cfg = TrainConfig { steps: 150, batch: 1, lr: 3e-3, ..Default::default() };
        let subs = Substreams::new(23);
        let report =
            train_supervised(&mut params, &data, &cfg, subs.stream("data-shuffle")).unwrap();
        assert!(report.final_loss < 0.01, "loss {}", report.final_loss);
        assert_eq!(predict(&params, &data.images[0]).unwrap(), 2);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let run = || {
            let mut params = tiny_params(24);
            let subs = Substreams::new(25);
            let mut data = LabeledImages::new(3, 8, 8);
            for i in 0..8 {
                data.push(random_image(&params.cfg, 40 + i), (i % 4) as usize).unwrap();
            }
            let cfg = TrainConfig { steps: 12, batch: 4, ..Default::default() };
            train_supervised(&mut params, &data, &cfg, subs.stream("data-shuffle")).unwrap();
            params
        };
        let a = run();
        let b = run();
        for ((_, ma), (_, mb)) in a.tensors().iter().zip(b.tensors().iter()) {
            assert_eq!(ma.as_slice(), mb.as_slice());
        }
    }
}
