//! Mini-batch training, the optional fine-tuning phase, and evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Encoded;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, mcc, ConfusionMatrix};
use crate::model::{FreezeMode, ParamGroup, VisTabNetModel};
use crate::optim::{adam_step, AdamState};
use crate::tensor::{argmax, Tensor};

const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_head: f64,
    pub lr_proj: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub finetune_epochs: usize,
    /// Defaults to `lr_head`.
    pub finetune_lr: Option<f64>,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_head: 1e-3,
            lr_proj: 1e-3,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            finetune_epochs: 0,
            finetune_lr: None,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_head, self.lr_proj, self.finetune_lr()];
        if lrs.iter().any(|lr| !(lr.is_finite() && *lr >= 0.0)) {
            return Err(Error::Config(format!(
                "learning rates must be finite and non-negative, got {lrs:?}"
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn finetune_lr(&self) -> f64 {
        self.finetune_lr.unwrap_or(self.lr_head)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Main,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Main => "main",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based, counted across phases.
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    /// Absent when there is no validation part.
    pub valid_mcc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Epoch count of the main phase, i.e. where fine-tuning starts.
    pub fn finetune_start(&self) -> Option<usize> {
        self.records.iter().position(|r| r.phase == Phase::Finetune)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "phase", "train_loss", "valid_mcc"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.phase.as_str().to_string(),
                r.train_loss.to_string(),
                r.valid_mcc.map_or_else(String::new, |v| v.to_string()),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mcc: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

pub fn predict(model: &VisTabNetModel, x: &Tensor) -> Result<Vec<usize>> {
    let m = x.cols();
    let mut out = Vec::with_capacity(x.rows());
    for start in (0..x.rows()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(x.rows());
        let chunk = Tensor::matrix(end - start, m, x.data()[start * m..end * m].to_vec())?;
        let logits = model.forward_batch(&chunk)?;
        out.extend((0..logits.rows()).map(|r| argmax(logits.row(r))));
    }
    Ok(out)
}

pub fn evaluate(model: &VisTabNetModel, part: &Encoded) -> Result<Evaluation> {
    if part.is_empty() {
        return Err(Error::contract("evaluation on an empty part"));
    }
    let pred = predict(model, &part.x)?;
    let confusion = ConfusionMatrix::from_predictions(part.classes, &part.y, &pred)?;
    Ok(Evaluation {
        mcc: mcc(&confusion)?,
        accuracy: accuracy(&confusion)?,
        confusion,
    })
}

/// Mean cross-entropy of one batch plus the gradient of every parameter
/// (`None` for frozen ones), in [`VisTabNetModel::parameters`] order.
pub fn loss_and_grads(model: &VisTabNetModel, x: &Tensor, y: &[usize]) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let input = tape.leaf_ref(x, false);
    let logits = bound.logits(&mut tape, input)?;
    let loss = tape.cross_entropy(logits, y)?;
    let value = tape.value(loss).item().unwrap_or(f64::NAN);
    tape.backward(loss)?;
    let grads = bound.vars().into_iter().map(|v| tape.take_grad(v)).collect();
    Ok((value, grads))
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    model: &mut VisTabNetModel,
    train: &Encoded,
    valid: Option<&Encoded>,
    config: &TrainConfig,
    epochs: usize,
    phase: Phase,
    lr_for: impl Fn(ParamGroup) -> f64,
    rng: &mut ChaCha8Rng,
    history: &mut TrainHistory,
) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    if train.is_empty() {
        return Err(Error::contract("training on an empty train set"));
    }
    if train.width() != model.input_dim() {
        return Err(Error::dim(format!(
            "train set has M = {}, model expects M = {}",
            train.width(),
            model.input_dim()
        )));
    }
    let lrs: Vec<f64> = model.parameters().iter().map(|(g, _)| lr_for(*g)).collect();
    let mut state = AdamState::new(model.parameters().into_iter().map(|(_, t)| t));
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..epochs {
        if config.shuffle {
            order.shuffle(rng);
        }
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let part = train.subset(batch);
            let (loss, grads) = loss_and_grads(model, &part.x, &part.y)?;
            if !loss.is_finite() {
                return Err(Error::State(format!("non-finite training loss {loss}")));
            }
            loss_sum += loss * batch.len() as f64;
            let mut params: Vec<&mut Tensor> = model.parameters_mut().into_iter().map(|(_, t)| t).collect();
            adam_step(&mut params, &grads, &lrs, &mut state)?;
        }
        let valid_mcc = match valid {
            Some(v) if !v.is_empty() => Some(evaluate(model, v)?.mcc),
            _ => None,
        };
        history.records.push(EpochRecord {
            epoch: history.len() + 1,
            phase,
            train_loss: loss_sum / train.len() as f64,
            valid_mcc,
        });
    }
    Ok(())
}

/// Main phase: `config.epochs` epochs under the model's freeze flags, the
/// adapter at `lr_proj` and everything else at `lr_head`.
pub fn train(
    model: &mut VisTabNetModel,
    train: &Encoded,
    valid: Option<&Encoded>,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    let mut history = TrainHistory::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (lr_head, lr_proj) = (config.lr_head, config.lr_proj);
    run_epochs(
        model,
        train,
        valid,
        config,
        config.epochs,
        Phase::Main,
        |g| match g {
            ParamGroup::Adapter => lr_proj,
            _ => lr_head,
        },
        &mut rng,
        &mut history,
    )?;
    Ok(history)
}

/// Second phase: unfreezes every group and trains `finetune_epochs` more
/// epochs at a single rate, appending to `history`.
pub fn finetune(
    model: &mut VisTabNetModel,
    train: &Encoded,
    valid: Option<&Encoded>,
    config: &TrainConfig,
    history: &mut TrainHistory,
) -> Result<()> {
    config.validate()?;
    if config.finetune_epochs == 0 {
        return Ok(());
    }
    model.set_freeze_mode(FreezeMode::FineTune);
    let lr = config.finetune_lr();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    run_epochs(
        model,
        train,
        valid,
        config,
        config.finetune_epochs,
        Phase::Finetune,
        |_| lr,
        &mut rng,
        history,
    )
}

/// [`train`] followed by [`finetune`].
pub fn fit(
    model: &mut VisTabNetModel,
    train_set: &Encoded,
    valid: Option<&Encoded>,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    let mut history = train(model, train_set, valid, config)?;
    finetune(model, train_set, valid, config, &mut history)?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn toy() -> (VisTabNetModel, Encoded) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = ModelSpec {
            n_views: 2,
            ..ModelSpec::default()
        };
        let model = spec.build(2, 2, None, 4, &mut rng).unwrap();
        let x = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.9, 0.1, -1.0, 0.0, -0.8, 0.2]).unwrap();
        let data = Encoded {
            x,
            y: vec![0, 0, 1, 1],
            classes: 2,
        };
        (model, data)
    }

    #[test]
    fn zero_epochs_is_no_op() {
        let (mut model, data) = toy();
        let before = model.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let h = train(&mut model, &data, None, &cfg).unwrap();
        assert!(h.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn empty_train_set_is_contract_error() {
        let (mut model, data) = toy();
        let empty = data.subset(&[]);
        let err = train(&mut model, &empty, None, &TrainConfig::default());
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn history_counts_both_phases() {
        let (mut model, data) = toy();
        let cfg = TrainConfig {
            epochs: 3,
            finetune_epochs: 2,
            ..TrainConfig::default()
        };
        let h = fit(&mut model, &data, Some(&data), &cfg).unwrap();
        assert_eq!(h.len(), 5);
        assert_eq!(h.finetune_start(), Some(3));
        assert!(h.records.iter().all(|r| r.valid_mcc.is_some()));
    }

    #[test]
    fn evaluation_matches_tally() {
        let (model, data) = toy();
        let pred = predict(&model, &data.x).unwrap();
        let e = evaluate(&model, &data).unwrap();
        let correct = pred.iter().zip(&data.y).filter(|(p, y)| p == y).count();
        assert_eq!(e.accuracy, correct as f64 / 4.0);
        assert_eq!(e.confusion.total(), 4);
    }
}
