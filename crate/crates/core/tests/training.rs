use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vistabnet::data::Encoded;
use vistabnet::encoder::{EncoderBundle, EncoderConfig};
use vistabnet::metrics::ConfusionMatrix;
use vistabnet::model::{FreezeMode, ModelSpec, ParamGroup, VisTabNetModel};
use vistabnet::train::*;
use vistabnet::Tensor;

fn separable(n: usize, seed: u64) -> Encoded {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(&[n, 2], 1.0, &mut rng);
    let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for (i, row) in x.data_mut().chunks_mut(2).enumerate() {
        row[0] += if y[i] == 1 { 3.0 } else { -3.0 };
    }
    Encoded { x, y, classes: 2 }
}

fn model(freeze: FreezeMode, seed: u64) -> VisTabNetModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = EncoderConfig {
        depth: 2,
        dim: 8,
        heads: 2,
        mlp_ratio: 2.0,
        max_seq: 4,
        patch: 1,
        channels: 1,
        image_hw: (1, 1),
    };
    let enc = EncoderBundle::random(config, false, &mut rng).unwrap();
    ModelSpec {
        n_views: 2,
        freeze,
        ..ModelSpec::default()
    }
    .build(2, 2, Some(&enc), 8, &mut rng)
    .unwrap()
}

fn group(m: &VisTabNetModel, g: ParamGroup) -> Vec<Tensor> {
    m.parameters()
        .into_iter()
        .filter(|(p, _)| *p == g)
        .map(|(_, t)| t.clone())
        .collect()
}

#[test]
fn same_seed_same_model_and_history() {
    let data = separable(64, 0);
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 16,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = model(FreezeMode::Frozen, 1);
        let h = fit(&mut m, &data, Some(&data), &cfg).unwrap();
        (m, h)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
}

#[test]
fn vanishing_rate_changes_nothing() {
    let data = separable(16, 2);
    for lr in [0.0, 1e-20] {
        let mut m = model(FreezeMode::FullyTrained, 3);
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            lr_head: lr,
            lr_proj: lr,
            ..TrainConfig::default()
        };
        train(&mut m, &data, None, &cfg).unwrap();
        for ((_, a), (_, b)) in before.parameters().iter().zip(m.parameters()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-15);
            }
        }
    }
}

#[test]
fn full_batch_loss_never_rises() {
    let data = separable(40, 4);
    let mut m = model(FreezeMode::Frozen, 5);
    let cfg = TrainConfig {
        epochs: 51,
        batch_size: 40,
        shuffle: false,
        lr_head: 1e-3,
        lr_proj: 1e-3,
        ..TrainConfig::default()
    };
    let h = train(&mut m, &data, None, &cfg).unwrap();
    for w in h.records.windows(2) {
        assert!(
            w[1].train_loss <= w[0].train_loss + 1e-12,
            "{} -> {}",
            w[0].train_loss,
            w[1].train_loss
        );
    }
}

#[test]
fn zero_adapter_rate_freezes_adapter_only() {
    let data = separable(32, 6);
    let mut m = model(FreezeMode::Frozen, 7);
    let (adapter, head) = (group(&m, ParamGroup::Adapter), group(&m, ParamGroup::Head));
    let cfg = TrainConfig {
        epochs: 3,
        lr_proj: 0.0,
        ..TrainConfig::default()
    };
    train(&mut m, &data, None, &cfg).unwrap();
    assert_eq!(group(&m, ParamGroup::Adapter), adapter);
    assert_ne!(group(&m, ParamGroup::Head), head);
}

#[test]
fn separable_toy_is_learned() {
    let data = separable(200, 8);
    let mut m = model(FreezeMode::Frozen, 9);
    let cfg = TrainConfig {
        epochs: 30,
        lr_head: 1e-2,
        lr_proj: 1e-2,
        ..TrainConfig::default()
    };
    train(&mut m, &data, None, &cfg).unwrap();
    assert!(evaluate(&m, &data).unwrap().mcc >= 0.95);
}

#[test]
fn finetune_phase() {
    let data = separable(32, 10);
    let mut m = model(FreezeMode::Frozen, 11);
    let checks = m.encoder_checksums();
    let mut h = train(
        &mut m,
        &data,
        None,
        &TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    assert_eq!(m.encoder_checksums(), checks);
    let frozen = m.clone();
    finetune(&mut m, &data, None, &TrainConfig::default(), &mut h).unwrap();
    assert_eq!(m, frozen);
    let cfg = TrainConfig {
        epochs: 2,
        finetune_epochs: 3,
        ..TrainConfig::default()
    };
    finetune(&mut m, &data, None, &cfg, &mut h).unwrap();
    assert_eq!(h.len(), 5);
    assert_ne!(m.encoder_checksums(), checks);
    assert!(h.records[2..].iter().all(|r| r.phase == Phase::Finetune));
}

#[test]
fn history_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let data = separable(16, 0);
    let mut m = model(FreezeMode::Frozen, 0);
    let h = fit(
        &mut m,
        &data,
        Some(&data),
        &TrainConfig {
            epochs: 2,
            finetune_epochs: 1,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let p = dir.path().join("h.csv");
    h.write_csv(&p).unwrap();
    let text = std::fs::read_to_string(p).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,phase,train_loss,valid_mcc");
    assert!(lines[3].starts_with("3,finetune,"));
}

#[test]
fn evaluation_matches_manual_tally() {
    let data = separable(10, 12);
    let m = model(FreezeMode::Frozen, 13);
    let e = evaluate(&m, &data).unwrap();
    let pred = predict(&m, &data.x).unwrap();
    let mut c = vec![vec![0u64; 2]; 2];
    for (t, p) in data.y.iter().zip(&pred) {
        c[*t][*p] += 1;
    }
    assert_eq!(e.confusion, ConfusionMatrix::from_counts(2, c.concat()).unwrap());
    let constant = pred.iter().all(|&p| p == pred[0]);
    let own = Encoded { y: pred, ..data };
    let want = if constant { 0.0 } else { 1.0 };
    assert_eq!(evaluate(&m, &own).unwrap().mcc, want);
}
