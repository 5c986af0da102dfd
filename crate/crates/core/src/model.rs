//! The adaptation network, the replacement classification head, and their
//! composition around an encoder slice.
//!
//! A row `x ∈ ℝᴹ` becomes `n` views `vᵢ = πᵢ(x) ∈ ℝᴰ`, each produced by its
//! own small MLP (GELU between layers, linear last layer). The sequence
//! `[CLS, v₁, …, vₙ]` (optionally plus the encoder's first `n+1` positional
//! rows) runs through the encoder slice, and the head reads the CLS output.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{linear, prepend_cls, BoundEncoder, EncoderBundle, LayerRange};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::TensorFile;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub input_dim: usize,
    pub n_views: usize,
    /// Linear layers per view; 1 means a single affine map.
    pub depth: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    /// One projection stack reused for every view.
    #[serde(default)]
    pub shared_weights: bool,
}

impl AdapterConfig {
    pub fn new(input_dim: usize, n_views: usize, depth: usize, out_dim: usize) -> Self {
        Self {
            input_dim,
            n_views,
            depth,
            hidden_dim: out_dim,
            out_dim,
            shared_weights: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 || self.depth == 0 || self.input_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config(format!(
                "adapter needs n_views, depth, input_dim and out_dim >= 1, got {self:?}"
            )));
        }
        if self.depth > 1 && self.hidden_dim == 0 {
            return Err(Error::Config("adapter hidden_dim must be >= 1".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|j| {
                let fan_in = if j == 0 { self.input_dim } else { self.hidden_dim };
                let fan_out = if j + 1 == self.depth {
                    self.out_dim
                } else {
                    self.hidden_dim
                };
                (fan_in, fan_out)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// `U(−1/√fan_in, 1/√fan_in)` for weight and bias.
    pub fn random<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        Self {
            weight: Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out)).expect("shape"),
            bias: Tensor::vector(draw(fan_out)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Weights φ of the adaptation network: one stack of [`Linear`] layers per
/// view, or a single stack when weights are shared.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterWeights {
    pub views: Vec<Vec<Linear>>,
}

impl AdapterWeights {
    pub fn random<R: Rng + ?Sized>(config: &AdapterConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stacks = if config.shared_weights { 1 } else { config.n_views };
        let views = (0..stacks)
            .map(|_| {
                config
                    .layer_dims()
                    .into_iter()
                    .map(|(i, o)| Linear::random(i, o, rng))
                    .collect()
            })
            .collect();
        Ok(Self { views })
    }

    pub fn zeros(config: &AdapterConfig) -> Result<Self> {
        config.validate()?;
        let stacks = if config.shared_weights { 1 } else { config.n_views };
        let views = (0..stacks)
            .map(|_| {
                config
                    .layer_dims()
                    .into_iter()
                    .map(|(i, o)| Linear::zeros(i, o))
                    .collect()
            })
            .collect();
        Ok(Self { views })
    }

    fn check(&self, config: &AdapterConfig) -> Result<()> {
        let stacks = if config.shared_weights { 1 } else { config.n_views };
        let dims = config.layer_dims();
        let ok = self.views.len() == stacks
            && self.views.iter().all(|stack| {
                stack.len() == dims.len()
                    && stack
                        .iter()
                        .zip(&dims)
                        .all(|(l, &(i, o))| l.weight.shape() == [i, o] && l.bias.shape() == [o])
            });
        if ok {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "adapter weights do not match {stacks} stacks of {dims:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Layer widths from the encoder width `D` to the class count `K`.
    pub widths: Vec<usize>,
}

impl HeadConfig {
    /// `depth` linear layers from `input` to `classes`, hidden width `hidden`.
    pub fn new(input: usize, hidden: usize, depth: usize, classes: usize) -> Self {
        let mut widths = vec![input];
        widths.extend(std::iter::repeat_n(hidden, depth.saturating_sub(1)));
        widths.push(classes);
        Self { widths }
    }

    pub fn depth(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn classes(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.classes() < 2 || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "head widths {:?} must have depth >= 1 and end in >= 2 classes",
                self.widths
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Cls,
    /// Mean over the view tokens.
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    /// Encoder untouched; adapter and head train.
    #[default]
    Frozen,
    /// Everything trains; used for the phase after frozen training.
    FineTune,
    /// Everything trains from the start.
    FullyTrained,
}

/// Which parameter groups are excluded from training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Freeze {
    pub adapter: bool,
    pub encoder: bool,
    pub head: bool,
}

impl Freeze {
    pub fn for_mode(mode: FreezeMode) -> Self {
        Self {
            adapter: false,
            encoder: mode == FreezeMode::Frozen,
            head: false,
        }
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Adapter => self.adapter,
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Head => self.head,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Adapter,
    Encoder,
    Head,
}

/// Adapter → encoder slice → head, with per-group freeze flags. An absent
/// encoder gives the ablation where the head reads the mean of the views.
#[derive(Clone, Debug, PartialEq)]
pub struct VisTabNetModel {
    pub adapter_config: AdapterConfig,
    pub adapter: AdapterWeights,
    pub encoder: Option<EncoderBundle>,
    pub range: LayerRange,
    pub head_config: HeadConfig,
    pub head: Vec<Linear>,
    pub freeze: Freeze,
    pub use_pos: bool,
    pub pooling: Pooling,
}

impl VisTabNetModel {
    /// Randomly initializes adapter and head around `encoder`. The encoder's
    /// patch projection is dropped: the adapter replaces it.
    pub fn new<R: Rng + ?Sized>(
        adapter_config: AdapterConfig,
        encoder: Option<EncoderBundle>,
        range: LayerRange,
        head_config: HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let adapter = AdapterWeights::random(&adapter_config, rng)?;
        let head = head_config
            .widths
            .windows(2)
            .map(|w| Linear::random(w[0], w[1], rng))
            .collect();
        Self::from_parts(adapter_config, adapter, encoder, range, head_config, head)
    }

    pub fn from_parts(
        adapter_config: AdapterConfig,
        adapter: AdapterWeights,
        mut encoder: Option<EncoderBundle>,
        range: LayerRange,
        head_config: HeadConfig,
        head: Vec<Linear>,
    ) -> Result<Self> {
        adapter_config.validate()?;
        head_config.validate()?;
        adapter.check(&adapter_config)?;
        if let Some(enc) = &mut encoder {
            enc.patch_proj = None;
            range.validate(enc.depth())?;
            if enc.dim() != adapter_config.out_dim {
                return Err(Error::dim(format!(
                    "adapter out_dim {} differs from encoder dim {}",
                    adapter_config.out_dim,
                    enc.dim()
                )));
            }
            if adapter_config.n_views + 1 > enc.config.max_seq {
                return Err(Error::Capacity {
                    needed: adapter_config.n_views + 1,
                    max_seq: enc.config.max_seq,
                });
            }
        }
        if head_config.widths[0] != adapter_config.out_dim {
            return Err(Error::dim(format!(
                "head input width {} differs from D = {}",
                head_config.widths[0], adapter_config.out_dim
            )));
        }
        let shapes_ok = head.len() == head_config.depth()
            && head
                .iter()
                .zip(head_config.widths.windows(2))
                .all(|(l, w)| l.weight.shape() == [w[0], w[1]] && l.bias.shape() == [w[1]]);
        if !shapes_ok {
            return Err(Error::dim(format!(
                "head weights do not match widths {:?}",
                head_config.widths
            )));
        }
        Ok(Self {
            adapter_config,
            adapter,
            encoder,
            range,
            head_config,
            head,
            freeze: Freeze::for_mode(FreezeMode::Frozen),
            use_pos: true,
            pooling: Pooling::Cls,
        })
    }

    pub fn classes(&self) -> usize {
        self.head_config.classes()
    }

    pub fn input_dim(&self) -> usize {
        self.adapter_config.input_dim
    }

    /// Sets freeze flags for `mode`; applying the same mode twice is a no-op.
    pub fn set_freeze_mode(&mut self, mode: FreezeMode) -> &mut Self {
        self.freeze = Freeze::for_mode(mode);
        self
    }

    pub fn with_freeze_mode(mut self, mode: FreezeMode) -> Self {
        self.set_freeze_mode(mode);
        self
    }

    /// Every parameter tensor with its group, in binding order.
    pub fn parameters(&self) -> Vec<(ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        for stack in &self.adapter.views {
            for l in stack {
                out.push((ParamGroup::Adapter, &l.weight));
                out.push((ParamGroup::Adapter, &l.bias));
            }
        }
        if let Some(enc) = &self.encoder {
            for (_, t) in enc.named_tensors() {
                out.push((ParamGroup::Encoder, t));
            }
        }
        for l in &self.head {
            out.push((ParamGroup::Head, &l.weight));
            out.push((ParamGroup::Head, &l.bias));
        }
        out
    }

    /// Same order as [`VisTabNetModel::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor)> {
        let mut out = Vec::new();
        for stack in &mut self.adapter.views {
            for l in stack {
                out.push((ParamGroup::Adapter, &mut l.weight));
                out.push((ParamGroup::Adapter, &mut l.bias));
            }
        }
        if let Some(enc) = &mut self.encoder {
            for t in enc.tensors_mut() {
                out.push((ParamGroup::Encoder, t));
            }
        }
        for l in &mut self.head {
            out.push((ParamGroup::Head, &mut l.weight));
            out.push((ParamGroup::Head, &mut l.bias));
        }
        out
    }

    /// Scalars that training may change under the current freeze flags.
    pub fn count_trainable(&self) -> usize {
        self.parameters()
            .iter()
            .filter(|(g, _)| !self.freeze.is_frozen(*g))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn count_group(&self, group: ParamGroup) -> usize {
        self.parameters()
            .iter()
            .filter(|(g, _)| *g == group)
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Records every parameter on `tape` by reference; frozen groups are
    /// untracked.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> BoundModel {
        let track_adapter = !self.freeze.adapter;
        let views = self
            .adapter
            .views
            .iter()
            .map(|stack| {
                stack
                    .iter()
                    .map(|l| {
                        (
                            tape.leaf_ref(&l.weight, track_adapter),
                            tape.leaf_ref(&l.bias, track_adapter),
                        )
                    })
                    .collect()
            })
            .collect();
        let encoder = self.encoder.as_ref().map(|e| e.bind(tape, !self.freeze.encoder));
        let head = self
            .head
            .iter()
            .map(|l| {
                (
                    tape.leaf_ref(&l.weight, !self.freeze.head),
                    tape.leaf_ref(&l.bias, !self.freeze.head),
                )
            })
            .collect();
        BoundModel {
            n_views: self.adapter_config.n_views,
            views,
            encoder,
            range: self.range,
            head,
            use_pos: self.use_pos,
            pooling: self.pooling,
        }
    }

    /// The `n×D` views `πᵢ(x)` of one row.
    pub fn adapter_forward(&self, x: &[f64]) -> Result<Tensor> {
        let m = self.input_dim();
        if x.len() != m {
            return Err(Error::dim(format!(
                "row has {} features, adapter expects M = {m}",
                x.len()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let input = tape.leaf(Tensor::matrix(1, m, x.to_vec())?, false);
        let views = bound.views(&mut tape, input)?;
        let d = self.adapter_config.out_dim;
        let mut data = Vec::with_capacity(views.len() * d);
        for v in views {
            data.extend_from_slice(tape.value(v).data());
        }
        Tensor::matrix(self.adapter_config.n_views, d, data)
    }

    /// Logits for one row.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = self.input_dim();
        if x.len() != m {
            return Err(Error::dim(format!(
                "row has {} features, model expects M = {m}",
                x.len()
            )));
        }
        Ok(self.forward_batch(&Tensor::matrix(1, m, x.to_vec())?)?.into_data())
    }

    /// Logits `B×K` for a `B×M` batch.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let input = tape.leaf_ref(x, false);
        let logits = bound.logits(&mut tape, input)?;
        Ok(tape.value(logits).clone())
    }

    pub fn encoder_checksums(&self) -> std::collections::BTreeMap<String, String> {
        self.encoder.as_ref().map(EncoderBundle::checksums).unwrap_or_default()
    }

    /// Named adapter and head tensors as stored in checkpoints.
    pub fn named_head_adapter(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, stack) in self.adapter.views.iter().enumerate() {
            for (j, l) in stack.iter().enumerate() {
                out.push((format!("adapter.view{i}.layer{j}.weight"), &l.weight));
                out.push((format!("adapter.view{i}.layer{j}.bias"), &l.bias));
            }
        }
        for (j, l) in self.head.iter().enumerate() {
            out.push((format!("head.layer{j}.weight"), &l.weight));
            out.push((format!("head.layer{j}.bias"), &l.bias));
        }
        out
    }

    /// Writes encoder, adapter and head tensors into one weight file.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = TensorFile::default();
        if let Some(enc) = &self.encoder {
            enc.write_into(&mut file);
        }
        for (name, t) in self.named_head_adapter() {
            file.tensors.insert(name, t.clone());
        }
        let header = CheckpointHeader {
            adapter: self.adapter_config.clone(),
            head: self.head_config.clone(),
            range: self.range,
            has_encoder: self.encoder.is_some(),
            use_pos: self.use_pos,
            pooling: self.pooling,
        };
        file.metadata.insert("model".into(), serde_json::to_string(&header)?);
        file.write(path)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = TensorFile::read(path)?;
        let raw = file
            .metadata
            .get("model")
            .ok_or_else(|| Error::Config("checkpoint metadata lacks `model`".into()))?;
        let header: CheckpointHeader = serde_json::from_str(raw)?;
        let encoder = if header.has_encoder {
            let config = crate::encoder::EncoderConfig::from_metadata(&file.metadata)?;
            Some(EncoderBundle::from_named(config, &mut file.tensors)?)
        } else {
            None
        };
        let mut take = |name: String| file.tensors.remove(&name).ok_or(Error::MissingTensor(name));
        let stacks = if header.adapter.shared_weights {
            1
        } else {
            header.adapter.n_views
        };
        let mut views = Vec::with_capacity(stacks);
        for i in 0..stacks {
            let mut stack = Vec::new();
            for j in 0..header.adapter.depth {
                stack.push(Linear {
                    weight: take(format!("adapter.view{i}.layer{j}.weight"))?,
                    bias: take(format!("adapter.view{i}.layer{j}.bias"))?,
                });
            }
            views.push(stack);
        }
        let mut head = Vec::new();
        for j in 0..header.head.depth() {
            head.push(Linear {
                weight: take(format!("head.layer{j}.weight"))?,
                bias: take(format!("head.layer{j}.bias"))?,
            });
        }
        let mut model = Self::from_parts(
            header.adapter,
            AdapterWeights { views },
            encoder,
            header.range,
            header.head,
            head,
        )?;
        model.use_pos = header.use_pos;
        model.pooling = header.pooling;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    adapter: AdapterConfig,
    head: HeadConfig,
    range: LayerRange,
    has_encoder: bool,
    use_pos: bool,
    pooling: Pooling,
}

/// `[cls (+pos₀); views (+posᵢ)]` for an `n×D` view matrix. Positional rows
/// past `n` are ignored.
pub fn assemble_tabular_sequence(views: &Tensor, encoder: &EncoderBundle, use_pos: bool) -> Result<Tensor> {
    prepend_cls(
        views,
        &encoder.cls_token,
        use_pos.then_some(&encoder.pos_embed),
        encoder.config.max_seq,
    )
}

/// A [`VisTabNetModel`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    n_views: usize,
    views: Vec<Vec<(Var, Var)>>,
    pub encoder: Option<BoundEncoder>,
    range: LayerRange,
    head: Vec<(Var, Var)>,
    use_pos: bool,
    pooling: Pooling,
}

impl BoundModel {
    /// Every bound variable, in [`VisTabNetModel::parameters`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for stack in &self.views {
            for (w, b) in stack {
                out.push(*w);
                out.push(*b);
            }
        }
        if let Some(enc) = &self.encoder {
            out.extend(enc.vars());
        }
        for (w, b) in &self.head {
            out.push(*w);
            out.push(*b);
        }
        out
    }

    /// One `B×D` variable per view.
    pub fn views(&self, tape: &mut Tape<'_>, x: Var) -> Result<Vec<Var>> {
        (0..self.n_views)
            .map(|i| {
                let stack = &self.views[if self.views.len() == 1 { 0 } else { i }];
                let mut h = x;
                for (j, (w, b)) in stack.iter().enumerate() {
                    if j > 0 {
                        h = tape.gelu(h);
                    }
                    h = linear(tape, h, *w, *b)?;
                }
                Ok(h)
            })
            .collect()
    }

    /// Pooled `B×D` representation fed to the head.
    pub fn features(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let batch = tape.value(x).rows();
        let views = self.views(tape, x)?;
        match &self.encoder {
            Some(enc) => {
                let seq = self.n_views + 1;
                let mut tokens = tape.interleave(Some(enc.cls), &views)?;
                if self.use_pos {
                    tokens = tape.add_positional(tokens, enc.pos, seq)?;
                }
                let out = enc.forward(tape, tokens, batch, seq, self.range)?;
                match self.pooling {
                    Pooling::Cls => {
                        let rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
                        tape.select_rows(out, &rows)
                    }
                    Pooling::Mean => tape.segment_mean(out, seq, 1),
                }
            }
            None => {
                let tokens = tape.interleave(None, &views)?;
                tape.segment_mean(tokens, self.n_views, 0)
            }
        }
    }

    /// `B×K` logits for a `B×M` batch.
    pub fn logits(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = self.features(tape, x)?;
        for (j, (w, b)) in self.head.iter().enumerate() {
            if j > 0 {
                h = tape.gelu(h);
            }
            h = linear(tape, h, *w, *b)?;
        }
        Ok(h)
    }
}

/// Serializable model recipe used by experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub n_views: usize,
    pub adapter_depth: usize,
    pub adapter_hidden: Option<usize>,
    pub head_depth: usize,
    pub head_hidden: Option<usize>,
    pub use_pos: bool,
    pub pooling: Pooling,
    pub shared_views: bool,
    /// Defaults to the full encoder.
    pub range: Option<LayerRange>,
    pub freeze: FreezeMode,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            n_views: 8,
            adapter_depth: 1,
            adapter_hidden: None,
            head_depth: 1,
            head_hidden: None,
            use_pos: true,
            pooling: Pooling::Cls,
            shared_views: false,
            range: None,
            freeze: FreezeMode::Frozen,
        }
    }
}

impl ModelSpec {
    /// Builds a model for `input_dim` features and `classes` classes.
    /// `dim` is the token width used when no encoder is given.
    pub fn build<R: Rng + ?Sized>(
        &self,
        input_dim: usize,
        classes: usize,
        encoder: Option<&EncoderBundle>,
        dim: usize,
        rng: &mut R,
    ) -> Result<VisTabNetModel> {
        let d = encoder.map_or(dim, EncoderBundle::dim);
        let adapter = AdapterConfig {
            input_dim,
            n_views: self.n_views,
            depth: self.adapter_depth,
            hidden_dim: self.adapter_hidden.unwrap_or(d),
            out_dim: d,
            shared_weights: self.shared_views,
        };
        let head = HeadConfig::new(d, self.head_hidden.unwrap_or(d), self.head_depth, classes);
        let range = match (self.range, encoder) {
            (Some(r), _) => r,
            (None, Some(e)) => LayerRange::full(e.depth()),
            (None, None) => LayerRange::new(0, 0),
        };
        let mut model = VisTabNetModel::new(adapter, encoder.cloned(), range, head, rng)?;
        model.use_pos = self.use_pos;
        model.pooling = self.pooling;
        model.set_freeze_mode(self.freeze);
        Ok(model)
    }
}
