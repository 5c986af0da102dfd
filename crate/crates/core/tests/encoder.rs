use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vistabnet::autodiff::Tape;
use vistabnet::encoder::{
    load_weights, load_weights_auto, patchify, save_weights, EncoderBundle, EncoderConfig, LayerRange,
};
use vistabnet::gradcheck::{finite_diff_grad, max_relative_error};
use vistabnet::weights::TensorFile;
use vistabnet::Tensor;

fn config(depth: usize, dim: usize, heads: usize) -> EncoderConfig {
    EncoderConfig {
        depth,
        dim,
        heads,
        mlp_ratio: 2.0,
        max_seq: 6,
        patch: 2,
        channels: 1,
        image_hw: (4, 4),
    }
}

fn bundle(depth: usize, dim: usize, seed: u64) -> EncoderBundle {
    EncoderBundle::random(config(depth, dim, 2), true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

mod common;
use common::*;

#[test]
fn one_layer_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let enc = EncoderBundle::random(config(1, 4, 2), false, &mut rng).unwrap();
    let t0 = Tensor::randn(&[2, 4], 1.0, &mut rng);
    let out = enc.forward(&t0, LayerRange::full(1)).unwrap();
    assert!(max_abs_diff(&out, &reference_forward(&enc, &t0, LayerRange::full(1))) < 1e-10);
}

#[test]
fn sliced_ranges_match_reference() {
    let enc = bundle(3, 8, 2);
    let t0 = Tensor::randn(&[5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    for (s, e) in [(0, 1), (1, 3), (0, 3), (2, 3)] {
        let r = LayerRange::new(s, e);
        let out = enc.forward(&t0, r).unwrap();
        assert!(max_abs_diff(&out, &reference_forward(&enc, &t0, r)) < 1e-10, "{r:?}");
    }
}

#[test]
fn zero_layers_pass_through_bit_exact() {
    let enc = EncoderBundle::zeros(config(3, 8, 2)).unwrap();
    let t0 = Tensor::randn(&[4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(enc.forward(&t0, LayerRange::new(0, 2)).unwrap(), t0);
}

#[test]
fn gradient_flows_to_inputs() {
    let enc = bundle(2, 8, 3);
    let t0 = Tensor::randn(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let w = Tensor::randn(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let loss = |x: &Tensor| -> f64 {
        let y = enc.forward(x, LayerRange::full(2)).unwrap();
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let analytic = {
        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape, false);
        let x = tape.leaf(t0.clone(), true);
        let y = bound.forward(&mut tape, x, 1, 3, LayerRange::full(2)).unwrap();
        let wv = tape.leaf(w.clone(), false);
        let p = tape.mul(y, wv).unwrap();
        let l = tape.sum(p);
        tape.backward(l).unwrap();
        for v in bound.vars() {
            assert!(tape.grad(v).is_none());
        }
        tape.grad(x).unwrap()
    };
    let numeric = finite_diff_grad(loss, &t0, 1e-5);
    assert!(max_relative_error(&analytic, &numeric) < 1e-4);
}

#[test]
fn patch_embedding_matches_two_step_oracle() {
    let enc = bundle(1, 8, 7);
    let image = Tensor::randn(&[4, 4, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
    let proj = enc.patch_proj.as_ref().unwrap();
    let mut flat = Vec::new();
    for py in 0..2 {
        for px in 0..2 {
            let mut row = Vec::new();
            for y in 0..2 {
                for x in 0..2 {
                    row.push(image.data()[(py * 2 + y) * 4 + px * 2 + x]);
                }
            }
            flat.push(row);
        }
    }
    assert_eq!(to_mat(&patchify(&image, 2).unwrap()), flat);
    let expected = lin(&flat, &proj.weight, &proj.bias);
    assert!(max_abs_diff(&enc.patch_embed(&image).unwrap(), &expected) < 1e-12);
}

#[test]
fn image_sequence_adds_positions() {
    let mut enc = bundle(1, 4, 1);
    let tokens = Tensor::randn(&[2, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let seq = enc.assemble_image_sequence(&tokens).unwrap();
    for j in 0..4 {
        assert_eq!(seq.row(0)[j], enc.cls_token.data()[j] + enc.pos_embed.row(0)[j]);
        for r in 0..2 {
            assert_eq!(seq.row(r + 1)[j], tokens.row(r)[j] + enc.pos_embed.row(r + 1)[j]);
        }
    }
    enc.pos_embed = Tensor::zeros(enc.pos_embed.shape());
    enc.cls_token = Tensor::zeros(enc.cls_token.shape());
    let seq = enc.assemble_image_sequence(&tokens).unwrap();
    assert_eq!(seq.row(0), &[0.0; 4]);
    assert_eq!(&seq.data()[4..], tokens.data());
}

#[test]
fn weight_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let enc = bundle(2, 32, 9);
    let (a, b) = (dir.path().join("a.weights"), dir.path().join("b.weights"));
    save_weights(&enc, &a).unwrap();
    let loaded = load_weights_auto(&a).unwrap();
    assert_eq!(loaded, enc);
    assert_eq!(loaded.checksums(), enc.checksums());
    save_weights(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let bytes = std::fs::read(&a).unwrap();
    let header = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    assert_eq!(TensorFile::header_size(&bytes), Some(8 + header));
    let payload: usize = enc.named_tensors().iter().map(|(_, t)| t.numel() * 8).sum();
    assert_eq!(bytes.len(), 8 + header + payload);
}

#[test]
fn patch_projection_is_optional_in_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut enc = bundle(1, 8, 1);
    enc.patch_proj = None;
    let p = dir.path().join("e.weights");
    save_weights(&enc, &p).unwrap();
    let file = TensorFile::read(&p).unwrap();
    assert!(!file.tensors.keys().any(|k| k.starts_with("patch_embed")));
    let back = load_weights(&p, &enc.config).unwrap();
    assert!(back.patch_proj.is_none());
    assert_eq!(back, enc);
}

#[test]
fn truncated_weight_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.weights");
    save_weights(&bundle(1, 8, 1), &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_weights_auto(&p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_preserves_shape(seed in 0u64..1000, seq in 1usize..6, s in 0usize..3, len in 1usize..4) {
        let enc = bundle(3, 8, seed);
        let e = (s + len).min(3);
        prop_assume!(s < e);
        let t0 = Tensor::randn(&[seq, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        let out = enc.forward(&t0, LayerRange::new(s, e)).unwrap();
        prop_assert_eq!(out.shape(), t0.shape());
    }

    #[test]
    fn slices_compose(seed in 0u64..1000, seq in 1usize..6) {
        let enc = bundle(4, 8, seed);
        let t0 = Tensor::randn(&[seq, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        for (a, b, c) in [(0, 1, 3), (0, 2, 3), (1, 2, 3)] {
            let whole = enc.forward(&t0, LayerRange::new(a, c)).unwrap();
            let mid = enc.forward(&t0, LayerRange::new(a, b)).unwrap();
            let parts = enc.forward(&mid, LayerRange::new(b, c)).unwrap();
            prop_assert!(max_relative_error(&whole, &parts) < 1e-12 || whole.data().iter().zip(parts.data()).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let enc = bundle(2, 8, seed);
        let t0 = Tensor::randn(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let a = enc.forward(&t0, LayerRange::full(2)).unwrap();
        let b = enc.forward(&t0, LayerRange::full(2)).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }
}
