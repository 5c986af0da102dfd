//! Browser bindings: MCC from a confusion matrix, a toy learning curve and
//! a toy layer-range heatmap.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use vistabnet::bench::full_grid;
use vistabnet::data::{split, Encoded, Preprocessor, SplitSpec};
use vistabnet::encoder::{EncoderBundle, EncoderConfig, LayerRange};
use vistabnet::metrics::{mcc, ConfusionMatrix};
use vistabnet::model::{ModelSpec, VisTabNetModel};
use vistabnet::synth::blobs;
use vistabnet::train::{evaluate, train, TrainConfig};
use vistabnet::Result;
use wasm_bindgen::prelude::*;

/// Depth of the toy encoder behind the demos.
pub const TOY_DEPTH: usize = 3;

/// MCC of a row-major `classes × classes` matrix (rows are true labels).
pub fn mcc_of(classes: usize, counts: &[u32]) -> Result<f64> {
    let c = ConfusionMatrix::from_counts(classes, counts.iter().map(|&v| u64::from(v)).collect())?;
    mcc(&c)
}

fn toy_encoder(seed: u64) -> Result<EncoderBundle> {
    let config = EncoderConfig {
        depth: TOY_DEPTH,
        dim: 16,
        heads: 2,
        mlp_ratio: 2.0,
        max_seq: 5,
        patch: 1,
        channels: 1,
        image_hw: (1, 1),
    };
    EncoderBundle::random(config, false, &mut ChaCha8Rng::seed_from_u64(seed))
}

struct Toy {
    encoder: EncoderBundle,
    train: Encoded,
    valid: Encoded,
    test: Encoded,
}

fn toy(seed: u64) -> Result<Toy> {
    let ds = blobs(150, 4, 3, 2.5, seed)?;
    let (tr, va, te) = split(&ds, &SplitSpec::new(seed))?;
    let mut prep = Preprocessor::new();
    prep.fit(&tr)?;
    Ok(Toy {
        encoder: toy_encoder(seed)?,
        train: prep.encode(&tr)?,
        valid: prep.encode(&va)?,
        test: prep.encode(&te)?,
    })
}

fn toy_model(toy: &Toy, range: Option<LayerRange>, seed: u64) -> Result<VisTabNetModel> {
    let spec = ModelSpec {
        n_views: 4,
        range,
        ..ModelSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.build(toy.train.width(), toy.train.classes, Some(&toy.encoder), 16, &mut rng)
}

fn toy_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        lr_head: 1e-2,
        lr_proj: 1e-2,
        seed,
        ..TrainConfig::default()
    }
}

/// Per-epoch training loss and validation MCC on a toy three-class task.
pub fn learning_curve_of(epochs: usize, seed: u64) -> Result<Value> {
    let toy = toy(seed)?;
    let mut model = toy_model(&toy, None, seed)?;
    let history = train(&mut model, &toy.train, Some(&toy.valid), &toy_train(epochs, seed))?;
    Ok(json!({
        "epochs": history.records.iter().map(|r| r.epoch).collect::<Vec<_>>(),
        "train_loss": history.records.iter().map(|r| r.train_loss).collect::<Vec<_>>(),
        "valid_mcc": history.records.iter().map(|r| r.valid_mcc).collect::<Vec<_>>(),
        "test_mcc": evaluate(&model, &toy.test)?.mcc,
    }))
}

/// Test MCC for every contiguous layer range of the toy encoder; `null`
/// marks empty cells (`end <= start`).
pub fn ablation_heatmap_of(epochs: usize, seed: u64) -> Result<Value> {
    let toy = toy(seed)?;
    let mut grid = vec![vec![None; TOY_DEPTH]; TOY_DEPTH];
    for range in full_grid(TOY_DEPTH) {
        let mut model = toy_model(&toy, Some(range), seed)?;
        train(&mut model, &toy.train, None, &toy_train(epochs, seed))?;
        grid[range.start][range.end - 1] = Some(evaluate(&model, &toy.test)?.mcc);
    }
    Ok(json!({
        "starts": (0..TOY_DEPTH).collect::<Vec<_>>(),
        "ends": (1..=TOY_DEPTH).collect::<Vec<_>>(),
        "mcc": grid,
    }))
}

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn mcc_from_counts(classes: usize, counts: &[u32]) -> std::result::Result<f64, JsError> {
    js(mcc_of(classes, counts))
}

/// JSON with `epochs`, `train_loss`, `valid_mcc` and `test_mcc`.
#[wasm_bindgen]
pub fn learning_curve(epochs: usize, seed: u32) -> std::result::Result<String, JsError> {
    js(learning_curve_of(epochs, u64::from(seed))).map(|v| v.to_string())
}

/// JSON with `starts`, `ends` and an `mcc` matrix indexed `[start][end - 1]`.
#[wasm_bindgen]
pub fn ablation_heatmap(epochs: usize, seed: u32) -> std::result::Result<String, JsError> {
    js(ablation_heatmap_of(epochs, u64::from(seed))).map(|v| v.to_string())
}
