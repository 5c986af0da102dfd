//! ViT-style transformer encoder: configuration, weights, patch embedding and
//! the layer-range-sliced forward pass.
//!
//! Blocks are pre-norm: `x + Attn(LN₁(x))` followed by `x + MLP(LN₂(x))`.
//! The final LayerNorm belongs to the encoder and is applied only when a
//! slice runs through the last layer, so partial slices expose the raw
//! residual stream.
//!
//! All projection matrices are stored `[in, out]` (activations multiply from
//! the left). Tensor names inside weight files:
//!
//! | name | shape |
//! |------|-------|
//! | `cls_token` | `[1, D]` |
//! | `pos_embed` | `[max_seq, D]` |
//! | `norm.weight`, `norm.bias` | `[D]` |
//! | `layers.{i}.ln1.weight`, `layers.{i}.ln1.bias` | `[D]` |
//! | `layers.{i}.attn.{q,k,v,proj}.weight` | `[D, D]` |
//! | `layers.{i}.attn.{q,k,v,proj}.bias` | `[D]` |
//! | `layers.{i}.ln2.weight`, `layers.{i}.ln2.bias` | `[D]` |
//! | `layers.{i}.mlp.fc1.weight` / `.bias` | `[D, H]` / `[H]` |
//! | `layers.{i}.mlp.fc2.weight` / `.bias` | `[H, D]` / `[D]` |
//! | `patch_embed.weight` / `.bias` (optional) | `[P²·C, D]` / `[D]` |
//!
//! Converting a timm/HF ViT checkpoint amounts to renaming
//! (`blocks.{i}.norm1` → `layers.{i}.ln1`, `blocks.{i}.attn.qkv` split in
//! three → `attn.{q,k,v}`, `blocks.{i}.mlp.fc1` → `mlp.fc1`, …) and
//! transposing every linear weight from `[out, in]` to `[in, out]`; the
//! patch convolution kernel `[D, C, P, P]` becomes `[P·P·C, D]` with
//! channels fastest.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::TensorFile;

/// LayerNorm epsilon used throughout the encoder.
pub const LN_EPS: f64 = 1e-6;

/// Standard deviation of freshly initialized weights (ViT convention).
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub max_seq: usize,
    pub patch: usize,
    pub channels: usize,
    pub image_hw: (usize, usize),
}

impl EncoderConfig {
    /// ViT-B/16 at 224×224.
    pub fn vit_base() -> Self {
        Self {
            depth: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4.0,
            max_seq: 197,
            patch: 16,
            channels: 3,
            image_hw: (224, 224),
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_count(&self) -> usize {
        (self.image_hw.0 / self.patch.max(1)) * (self.image_hw.1 / self.patch.max(1))
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.max_seq < 2 {
            return Err(Error::Config(format!(
                "max_seq {} leaves no room for CLS plus one token",
                self.max_seq
            )));
        }
        if self.mlp_hidden() == 0 {
            return Err(Error::Config("mlp_ratio yields an empty hidden layer".into()));
        }
        Ok(())
    }

    pub fn validate_patch_path(&self) -> Result<()> {
        let (h, w) = self.image_hw;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::dim(format!(
                "image {h}x{w} not divisible into {p}x{p} patches",
                p = self.patch
            )));
        }
        if self.patch_count() + 1 > self.max_seq {
            return Err(Error::Capacity {
                needed: self.patch_count() + 1,
                max_seq: self.max_seq,
            });
        }
        Ok(())
    }

    pub(crate) fn to_metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("depth".into(), self.depth.to_string());
        m.insert("dim".into(), self.dim.to_string());
        m.insert("heads".into(), self.heads.to_string());
        m.insert("mlp_ratio".into(), self.mlp_ratio.to_string());
        m.insert("max_seq".into(), self.max_seq.to_string());
        m.insert("patch".into(), self.patch.to_string());
        m.insert("channels".into(), self.channels.to_string());
        m.insert("image_h".into(), self.image_hw.0.to_string());
        m.insert("image_w".into(), self.image_hw.1.to_string());
        m
    }

    pub(crate) fn from_metadata(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = m
                .get(key)
                .ok_or_else(|| Error::Config(format!("weight file metadata lacks `{key}`")))?;
            raw.parse()
                .map_err(|_| Error::Config(format!("metadata `{key}` = {raw:?} is malformed")))
        }
        Ok(Self {
            depth: get(m, "depth")?,
            dim: get(m, "dim")?,
            heads: get(m, "heads")?,
            mlp_ratio: get(m, "mlp_ratio")?,
            max_seq: get(m, "max_seq")?,
            patch: get(m, "patch")?,
            channels: get(m, "channels")?,
            image_hw: (get(m, "image_h")?, get(m, "image_w")?),
        })
    }
}

/// Half-open slice `start..end` of encoder layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn full(depth: usize) -> Self {
        Self { start: 0, end: depth }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.start < self.end && self.end <= depth {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "layer range ({}, {}) invalid for depth {depth}",
                self.start, self.end
            )))
        }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub q_weight: Tensor,
    pub q_bias: Tensor,
    pub k_weight: Tensor,
    pub k_bias: Tensor,
    pub v_weight: Tensor,
    pub v_bias: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

const LAYER_SLOTS: [&str; 16] = [
    "ln1.weight",
    "ln1.bias",
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "ln2.weight",
    "ln2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

impl LayerWeights {
    fn init(config: &EncoderConfig, mut weight: impl FnMut(&[usize]) -> Tensor) -> Self {
        let d = config.dim;
        let h = config.mlp_hidden();
        Self {
            ln1_gain: Tensor::filled(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            q_weight: weight(&[d, d]),
            q_bias: Tensor::zeros(&[d]),
            k_weight: weight(&[d, d]),
            k_bias: Tensor::zeros(&[d]),
            v_weight: weight(&[d, d]),
            v_bias: Tensor::zeros(&[d]),
            proj_weight: weight(&[d, d]),
            proj_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::filled(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            fc1_weight: weight(&[d, h]),
            fc1_bias: Tensor::zeros(&[h]),
            fc2_weight: weight(&[h, d]),
            fc2_bias: Tensor::zeros(&[d]),
        }
    }

    fn expected_shapes(config: &EncoderConfig) -> [Vec<usize>; 16] {
        let d = config.dim;
        let h = config.mlp_hidden();
        [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, h],
            vec![h],
            vec![h, d],
            vec![d],
        ]
    }

    pub fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.q_weight,
            &self.q_bias,
            &self.k_weight,
            &self.k_bias,
            &self.v_weight,
            &self.v_bias,
            &self.proj_weight,
            &self.proj_bias,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.fc1_weight,
            &self.fc1_bias,
            &self.fc2_weight,
            &self.fc2_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.q_weight,
            &mut self.q_bias,
            &mut self.k_weight,
            &mut self.k_bias,
            &mut self.v_weight,
            &mut self.v_bias,
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]
    }

    fn from_slots(mut slots: Vec<Tensor>) -> Self {
        assert_eq!(slots.len(), 16);
        let mut it = slots.drain(..);
        let mut next = || it.next().expect("16 slots");
        Self {
            ln1_gain: next(),
            ln1_bias: next(),
            q_weight: next(),
            q_bias: next(),
            k_weight: next(),
            k_bias: next(),
            v_weight: next(),
            v_bias: next(),
            proj_weight: next(),
            proj_bias: next(),
            ln2_gain: next(),
            ln2_bias: next(),
            fc1_weight: next(),
            fc1_bias: next(),
            fc2_weight: next(),
            fc2_bias: next(),
        }
    }
}

/// Linear patch projection used only on the image (pre-training) path.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchProjection {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBundle {
    pub config: EncoderConfig,
    pub layers: Vec<LayerWeights>,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub pos_embed: Tensor,
    pub cls_token: Tensor,
    pub patch_proj: Option<PatchProjection>,
}

impl EncoderBundle {
    /// Freshly initialized bundle: weights, CLS and positions `N(0, 0.02²)`,
    /// LayerNorm gains one, every bias zero.
    pub fn random<R: Rng + ?Sized>(config: EncoderConfig, with_patch: bool, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut draw = |shape: &[usize]| Tensor::randn(shape, INIT_STD, rng);
        let layers = (0..config.depth)
            .map(|_| LayerWeights::init(&config, &mut draw))
            .collect();
        let pos_embed = draw(&[config.max_seq, d]);
        let cls_token = draw(&[1, d]);
        let patch_proj = if with_patch {
            config.validate_patch_path()?;
            Some(PatchProjection {
                weight: draw(&[config.patch_len(), d]),
                bias: Tensor::zeros(&[d]),
            })
        } else {
            None
        };
        Ok(Self {
            layers,
            norm_gain: Tensor::filled(&[d], 1.0),
            norm_bias: Tensor::zeros(&[d]),
            pos_embed,
            cls_token,
            patch_proj,
            config,
        })
    }

    /// Bundle whose attention and MLP weights are all zero (gains one), so
    /// every block is a residual passthrough.
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let layers = (0..config.depth)
            .map(|_| LayerWeights::init(&config, Tensor::zeros))
            .collect();
        Ok(Self {
            layers,
            norm_gain: Tensor::filled(&[d], 1.0),
            norm_bias: Tensor::zeros(&[d]),
            pos_embed: Tensor::zeros(&[config.max_seq, d]),
            cls_token: Tensor::zeros(&[1, d]),
            patch_proj: None,
            config,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    /// Every tensor under its canonical name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("cls_token".to_string(), &self.cls_token),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (slot, t) in LAYER_SLOTS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{slot}"), t));
            }
        }
        out.push(("norm.weight".into(), &self.norm_gain));
        out.push(("norm.bias".into(), &self.norm_bias));
        if let Some(p) = &self.patch_proj {
            out.push(("patch_embed.weight".into(), &p.weight));
            out.push(("patch_embed.bias".into(), &p.bias));
        }
        out
    }

    /// Same order as [`EncoderBundle::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.cls_token, &mut self.pos_embed];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.norm_gain);
        out.push(&mut self.norm_bias);
        if let Some(p) = &mut self.patch_proj {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
        }
        out
    }

    /// Scalar count over every tensor except the optional patch projection.
    pub fn param_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(n, _)| !n.starts_with("patch_embed."))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Per-tensor checksums keyed by canonical name.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.checksum()))
            .collect()
    }

    /// Assembles a bundle from named tensors, validating every shape.
    pub fn from_named(config: EncoderConfig, tensors: &mut BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut take = |name: &str, shape: &[usize]| take_tensor(tensors, name, shape);
        let cls_token = take("cls_token", &[1, d])?;
        let pos_embed = take("pos_embed", &[config.max_seq, d])?;
        let shapes = LayerWeights::expected_shapes(&config);
        let mut layers = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let slots = LAYER_SLOTS
                .iter()
                .zip(&shapes)
                .map(|(slot, shape)| take(&format!("layers.{i}.{slot}"), shape))
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerWeights::from_slots(slots));
        }
        let norm_gain = take("norm.weight", &[d])?;
        let norm_bias = take("norm.bias", &[d])?;
        let patch_proj = if tensors.contains_key("patch_embed.weight") {
            Some(PatchProjection {
                weight: take_tensor(tensors, "patch_embed.weight", &[config.patch_len(), d])?,
                bias: take_tensor(tensors, "patch_embed.bias", &[d])?,
            })
        } else {
            None
        };
        Ok(Self {
            config,
            layers,
            norm_gain,
            norm_bias,
            pos_embed,
            cls_token,
            patch_proj,
        })
    }

    pub(crate) fn write_into(&self, file: &mut TensorFile) {
        for (name, t) in self.named_tensors() {
            file.tensors.insert(name, t.clone());
        }
        file.metadata.extend(self.config.to_metadata());
    }

    /// Records the encoder's weights on `tape` by reference.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, tracked: bool) -> BoundEncoder {
        let mut leaf = |t: &'a Tensor| tape.leaf_ref(t, tracked);
        let cls = leaf(&self.cls_token);
        let pos = leaf(&self.pos_embed);
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer(l.tensors().map(&mut leaf)))
            .collect();
        let norm = (leaf(&self.norm_gain), leaf(&self.norm_bias));
        let patch = self.patch_proj.as_ref().map(|p| (leaf(&p.weight), leaf(&p.bias)));
        BoundEncoder {
            config: self.config.clone(),
            cls,
            pos,
            layers,
            norm,
            patch,
        }
    }

    /// Applies layers `range.start..range.end` to one `S×D` sequence.
    pub fn forward(&self, t0: &Tensor, range: LayerRange) -> Result<Tensor> {
        let seq = t0.rows();
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.leaf_ref(t0, false);
        let y = bound.forward(&mut tape, x, 1, seq, range)?;
        Ok(tape.value(y).clone())
    }

    /// Splits an `H×W×C` image into `P×P` patches (row-major over the patch
    /// grid, pixels row-major and channels fastest inside a patch) and
    /// projects each one to `D`.
    pub fn patch_embed(&self, image: &Tensor) -> Result<Tensor> {
        let proj = self
            .patch_proj
            .as_ref()
            .ok_or_else(|| Error::MissingTensor("patch_embed.weight".into()))?;
        let patches = patchify(image, self.config.patch)?;
        if patches.cols() != proj.weight.shape()[0] {
            return Err(Error::dim(format!(
                "patch length {} against projection {:?}",
                patches.cols(),
                proj.weight.shape()
            )));
        }
        let mut out = patches.matmul(&proj.weight)?;
        let d = self.config.dim;
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(proj.bias.data()) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// `[CLS + pos₀; tᵢ + posᵢ]` for `n` patch tokens.
    pub fn assemble_image_sequence(&self, patch_tokens: &Tensor) -> Result<Tensor> {
        prepend_cls(
            patch_tokens,
            &self.cls_token,
            Some(&self.pos_embed),
            self.config.max_seq,
        )
    }
}

fn take_tensor(tensors: &mut BTreeMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
    if t.shape() != shape {
        return Err(Error::dim(format!(
            "tensor `{name}`: expected shape {shape:?}, found {:?}",
            t.shape()
        )));
    }
    Ok(t)
}

/// `[cls (+pos₀); rowᵢ (+posᵢ)]`. Shared by the image and tabular paths.
pub(crate) fn prepend_cls(tokens: &Tensor, cls: &Tensor, pos: Option<&Tensor>, max_seq: usize) -> Result<Tensor> {
    let n = match tokens.shape() {
        [n, _] => *n,
        s => return Err(Error::dim(format!("token matrix must be [n, D], got {s:?}"))),
    };
    let d = cls.numel();
    if tokens.cols() != d {
        return Err(Error::dim(format!(
            "tokens of width {} against CLS of width {d}",
            tokens.cols()
        )));
    }
    if n == 0 || n + 1 > max_seq {
        return Err(Error::Capacity { needed: n + 1, max_seq });
    }
    let mut data = Vec::with_capacity((n + 1) * d);
    data.extend_from_slice(cls.data());
    data.extend_from_slice(tokens.data());
    if let Some(pos) = pos {
        for (o, p) in data.iter_mut().zip(pos.data()) {
            *o += p;
        }
    }
    Tensor::new(vec![n + 1, d], data)
}

/// Flattens an `H×W×C` image into `(H/P·W/P) × (P²·C)` patch rows.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w, c) = match image.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::dim(format!("image must be [H, W, C], got {s:?}"))),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(format!(
            "image {h}x{w} not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let len = patch * patch * c;
    let src = image.data();
    let mut data = Vec::with_capacity(gh * gw * len);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch {
                let y = pr * patch + r;
                let start = (y * w + pc * patch) * c;
                data.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, len], data)
}

/// One encoder layer's weights recorded on a tape, in
/// [`LayerWeights::tensors`] order.
#[derive(Clone, Copy, Debug)]
pub struct BoundLayer(pub [Var; 16]);

impl BoundLayer {
    /// One pre-norm block over `batch` sequences of `seq` tokens.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let [ln1_g, ln1_b, qw, qb, kw, kb, vw, vb, pw, pb, ln2_g, ln2_b, f1w, f1b, f2w, f2b] = self.0;
        let h = tape.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
        let q = linear(tape, h, qw, qb)?;
        let k = linear(tape, h, kw, kb)?;
        let v = linear(tape, h, vw, vb)?;
        let ctx = tape.attention(q, k, v, batch, seq, heads)?;
        let attn_out = linear(tape, ctx, pw, pb)?;
        let x = tape.add(x, attn_out)?;
        let h = tape.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
        let hidden = linear(tape, h, f1w, f1b)?;
        let hidden = tape.gelu(hidden);
        let mlp_out = linear(tape, hidden, f2w, f2b)?;
        tape.add(x, mlp_out)
    }
}

pub(crate) fn linear(tape: &mut Tape<'_>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    tape.add_bias(y, bias)
}

/// An [`EncoderBundle`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub config: EncoderConfig,
    pub cls: Var,
    pub pos: Var,
    pub layers: Vec<BoundLayer>,
    pub norm: (Var, Var),
    pub patch: Option<(Var, Var)>,
}

impl BoundEncoder {
    /// Every bound variable, in [`EncoderBundle::named_tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.cls, self.pos];
        for l in &self.layers {
            out.extend(l.0);
        }
        out.push(self.norm.0);
        out.push(self.norm.1);
        if let Some((w, b)) = self.patch {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Runs `x` (`(batch·seq)×D`) through the layer slice.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, batch: usize, seq: usize, range: LayerRange) -> Result<Var> {
        range.validate(self.config.depth)?;
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.dim || shape[0] != batch * seq {
            return Err(Error::dim(format!(
                "encoder input {shape:?} for batch {batch} x seq {seq} x dim {}",
                self.config.dim
            )));
        }
        if seq > self.config.max_seq {
            return Err(Error::Capacity {
                needed: seq,
                max_seq: self.config.max_seq,
            });
        }
        let mut h = x;
        for layer in &self.layers[range.start..range.end] {
            h = layer.forward(tape, h, batch, seq, self.config.heads)?;
        }
        if range.end == self.config.depth {
            h = tape.layer_norm(h, self.norm.0, self.norm.1, LN_EPS)?;
        }
        Ok(h)
    }

    /// Patch tokens for a batch of `B` images already flattened by
    /// [`patchify`] and stacked to `(B·n)×(P²·C)`.
    pub fn embed_patches(&self, tape: &mut Tape<'_>, patches: Var) -> Result<Var> {
        let (w, b) = self
            .patch
            .ok_or_else(|| Error::MissingTensor("patch_embed.weight".into()))?;
        linear(tape, patches, w, b)
    }
}

/// Loads an encoder whose shapes must match `config`.
pub fn load_weights(path: impl AsRef<Path>, config: &EncoderConfig) -> Result<EncoderBundle> {
    let mut file = TensorFile::read(path)?;
    EncoderBundle::from_named(config.clone(), &mut file.tensors)
}

/// Loads an encoder, taking the configuration from the file's metadata.
pub fn load_weights_auto(path: impl AsRef<Path>) -> Result<EncoderBundle> {
    let mut file = TensorFile::read(path)?;
    let config = EncoderConfig::from_metadata(&file.metadata)?;
    EncoderBundle::from_named(config, &mut file.tensors)
}

pub fn save_weights(bundle: &EncoderBundle, path: impl AsRef<Path>) -> Result<()> {
    let mut file = TensorFile::default();
    bundle.write_into(&mut file);
    file.write(path)
}
