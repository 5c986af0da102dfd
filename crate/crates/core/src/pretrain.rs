//! Desk-scale pre-training of a tiny encoder on the grating task.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{linear, patchify, BoundEncoder, EncoderBundle, EncoderConfig, LayerRange};
use crate::error::{Error, Result};
use crate::model::Linear;
use crate::optim::{adam_step, AdamState};
use crate::synth::{gratings, GratingSpec};
use crate::tensor::{argmax, Tensor};

/// Accuracy below which pre-training is declared failed.
pub const MIN_ACCURACY: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSpec {
    pub encoder: EncoderConfig,
    pub task: GratingSpec,
    pub max_epochs: usize,
    pub target_accuracy: f64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig {
                depth: 2,
                dim: 32,
                heads: 4,
                mlp_ratio: 4.0,
                max_seq: 17,
                patch: 4,
                channels: 1,
                image_hw: (8, 8),
            },
            task: GratingSpec::default(),
            max_epochs: 60,
            target_accuracy: 0.9,
            lr: 1e-3,
            batch_size: 32,
        }
    }
}

impl PretrainSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.encoder.validate_patch_path()?;
        if (self.task.height, self.task.width) != self.encoder.image_hw || self.encoder.channels != 1 {
            return Err(Error::Config(format!(
                "task images {}x{}x1 do not match encoder input {:?}x{}",
                self.task.height, self.task.width, self.encoder.image_hw, self.encoder.channels
            )));
        }
        if self.batch_size == 0 || self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("pre-training needs batch_size ≥ 1 and lr > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    /// Encoder with its patch projection; the image head is discarded.
    pub encoder: EncoderBundle,
    pub train_accuracy: f64,
    pub epochs: usize,
}

/// Patch rows regrouped per patch position: element `p` is `B×(P²·C)`.
fn patch_batches(patches: &[Tensor], indices: &[usize]) -> Result<Vec<Tensor>> {
    let n = patches[0].rows();
    let len = patches[0].cols();
    (0..n)
        .map(|p| {
            let mut data = Vec::with_capacity(indices.len() * len);
            for &i in indices {
                data.extend_from_slice(patches[i].row(p));
            }
            Tensor::matrix(indices.len(), len, data)
        })
        .collect()
}

/// Image logits `B×K` recorded on `tape`.
fn image_logits(
    tape: &mut Tape<'_>,
    encoder: &BoundEncoder,
    head: (Var, Var),
    per_patch: Vec<Var>,
    batch: usize,
) -> Result<Var> {
    let tokens = per_patch
        .into_iter()
        .map(|p| encoder.embed_patches(tape, p))
        .collect::<Result<Vec<_>>>()?;
    let seq = tokens.len() + 1;
    let x = tape.interleave(Some(encoder.cls), &tokens)?;
    let x = tape.add_positional(x, encoder.pos, seq)?;
    let out = encoder.forward(tape, x, batch, seq, LayerRange::full(encoder.config.depth))?;
    let rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
    let cls = tape.select_rows(out, &rows)?;
    linear(tape, cls, head.0, head.1)
}

fn accuracy(encoder: &EncoderBundle, head: &Linear, patches: &[Tensor], labels: &[usize]) -> Result<f64> {
    let all: Vec<usize> = (0..labels.len()).collect();
    let mut correct = 0;
    for chunk in all.chunks(256) {
        let mut tape = Tape::new();
        let bound = encoder.bind(&mut tape, false);
        let hw = (tape.leaf_ref(&head.weight, false), tape.leaf_ref(&head.bias, false));
        let per_patch = patch_batches(patches, chunk)?
            .into_iter()
            .map(|t| tape.leaf(t, false))
            .collect();
        let logits = image_logits(&mut tape, &bound, hw, per_patch, chunk.len())?;
        let l = tape.value(logits);
        correct += chunk
            .iter()
            .enumerate()
            .filter(|(r, &i)| argmax(l.row(*r)) == labels[i])
            .count();
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Trains patch embedding, encoder and a temporary linear image head until
/// train accuracy reaches the target or the epoch cap. Fails if accuracy
/// stays below [`MIN_ACCURACY`].
pub fn pretrain_tiny(spec: &PretrainSpec, seed: u64) -> Result<PretrainOutcome> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (images, labels) = gratings(&spec.task, seed)?;
    let patches: Vec<Tensor> = images
        .iter()
        .map(|im| patchify(im, spec.encoder.patch))
        .collect::<Result<_>>()?;
    let mut encoder = EncoderBundle::random(spec.encoder.clone(), true, &mut rng)?;
    let mut head = Linear::random(spec.encoder.dim, spec.task.classes, &mut rng);

    let mut state = AdamState::new(
        encoder
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t)
            .chain([&head.weight, &head.bias]),
    );
    let lrs = vec![spec.lr; state.len()];
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut acc = 0.0;
    let mut epochs = 0;
    while epochs < spec.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(spec.batch_size) {
            let grads = {
                let mut tape = Tape::new();
                let bound = encoder.bind(&mut tape, true);
                let hw = (tape.leaf_ref(&head.weight, true), tape.leaf_ref(&head.bias, true));
                let per_patch = patch_batches(&patches, batch)?
                    .into_iter()
                    .map(|t| tape.leaf(t, false))
                    .collect();
                let logits = image_logits(&mut tape, &bound, hw, per_patch, batch.len())?;
                let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let loss = tape.cross_entropy(logits, &y)?;
                tape.backward(loss)?;
                let mut vars = bound.vars();
                vars.extend([hw.0, hw.1]);
                vars.into_iter().map(|v| tape.take_grad(v)).collect::<Vec<_>>()
            };
            let mut tensors = encoder.tensors_mut();
            tensors.push(&mut head.weight);
            tensors.push(&mut head.bias);
            adam_step(&mut tensors, &grads, &lrs, &mut state)?;
        }
        epochs += 1;
        acc = accuracy(&encoder, &head, &patches, &labels)?;
        if acc >= spec.target_accuracy {
            break;
        }
    }
    if acc < MIN_ACCURACY {
        return Err(Error::Pretrain(format!(
            "train accuracy {acc:.3} after {epochs} epochs is below {MIN_ACCURACY}"
        )));
    }
    Ok(PretrainOutcome {
        encoder,
        train_accuracy: acc,
        epochs,
    })
}
