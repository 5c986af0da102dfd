use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vistabnet::autodiff::Tape;
use vistabnet::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..50.0) {
        let x = Tensor::randn(&[rows, cols], scale, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut tape = Tape::new();
        let v = tape.leaf(x, false);
        let s = tape.softmax(v);
        let out = tape.value(s);
        for r in 0..rows {
            prop_assert!((out.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes(seed in any::<u64>(), cols in 2usize..16, scale in 0.5f64..20.0) {
        let x = Tensor::randn(&[3, cols], scale, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut tape = Tape::new();
        let v = tape.leaf(x, false);
        let g = tape.leaf(Tensor::vector(vec![1.0; cols]), false);
        let b = tape.leaf(Tensor::vector(vec![0.0; cols]), false);
        let y = tape.layer_norm(v, g, b, 1e-14).unwrap();
        let out = tape.value(y);
        for r in 0..3 {
            let row = out.row(r);
            let n = cols as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn forward_is_bit_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let (x, w) = (tape.leaf(a.clone(), false), tape.leaf(b.clone(), false));
            let y = tape.matmul(x, w).unwrap();
            let y = tape.gelu(y);
            let y = tape.softmax(y);
            tape.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn layer_norm_two_point_row() {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap(), false);
    let g = tape.leaf(Tensor::vector(vec![1.0, 1.0]), false);
    let b = tape.leaf(Tensor::vector(vec![0.0, 0.0]), false);
    let y = tape.layer_norm(v, g, b, 1e-14).unwrap();
    let out = tape.value(y).data();
    assert!((out[0] + 1.0).abs() < 1e-12 && (out[1] - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_extremes() {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap(), false);
    let s = tape.softmax(v);
    let out = tape.value(s).data();
    assert!(out.iter().all(|p| p.is_finite()));
    assert!((out[0] - 1.0).abs() < 1e-12 && out[1] < 1e-300);
}

#[test]
fn backward_of_squares() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    assert!(tape.backward(loss).is_err());
}
