//! Scalar reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vistabnet::autodiff::{Tape, Var};
use vistabnet::encoder::{EncoderBundle, LayerRange, LN_EPS};
use vistabnet::gradcheck::{finite_diff_grad, max_relative_error};
use vistabnet::model::VisTabNetModel;
use vistabnet::train::loss_and_grads;
use vistabnet::Tensor;

/// Finite-difference step.
pub const H: f64 = 1e-5;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn lin(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let (i, o) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..o)
                .map(|c| b.data()[c] + (0..i).map(|k| row[k] * w.data()[k * o + c]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn norm(x: &Mat, g: &Tensor, b: &Tensor) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + LN_EPS).sqrt() * g.data()[j] + b.data()[j])
                .collect()
        })
        .collect()
}

pub fn erf(x: f64) -> f64 {
    // series expansion, adequate for |x| < 6
    if x.abs() > 6.0 {
        return x.signum();
    }
    let mut sum = 0.0f64;
    let mut term: f64 = x;
    let mut n = 0.0;
    while term.abs() > 1e-17 * sum.abs().max(1e-300) || n < 3.0 {
        sum += term / (2.0 * n + 1.0);
        n += 1.0;
        term *= -x * x / n;
        if n > 400.0 {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn reference_forward(enc: &EncoderBundle, t0: &Tensor, range: LayerRange) -> Mat {
    let mut x = to_mat(t0);
    let heads = enc.config.heads;
    let d = enc.config.dim;
    let dh = d / heads;
    for l in &enc.layers[range.start..range.end] {
        let h = norm(&x, &l.ln1_gain, &l.ln1_bias);
        let (q, k, v) = (
            lin(&h, &l.q_weight, &l.q_bias),
            lin(&h, &l.k_weight, &l.k_bias),
            lin(&h, &l.v_weight, &l.v_bias),
        );
        let s = x.len();
        let mut ctx = vec![vec![0.0; d]; s];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..s {
                let scores: Vec<f64> = (0..s)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|z| (z - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    ctx[i][c] = (0..s).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        x = add(&x, &lin(&ctx, &l.proj_weight, &l.proj_bias));
        let h = norm(&x, &l.ln2_gain, &l.ln2_bias);
        let mut hidden = lin(&h, &l.fc1_weight, &l.fc1_bias);
        for row in &mut hidden {
            for v in row.iter_mut() {
                *v = *v * 0.5 * (1.0 + erf(*v / std::f64::consts::SQRT_2));
            }
        }
        x = add(&x, &lin(&hidden, &l.fc2_weight, &l.fc2_bias));
    }
    if range.end == enc.depth() {
        x = norm(&x, &enc.norm_gain, &enc.norm_bias);
    }
    x
}

pub fn max_abs_diff(a: &Tensor, b: &Mat) -> f64 {
    to_mat(a)
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Literal triple-sum form of the multiclass Matthews coefficient, with
/// `c[k][l]` counting truth `k` predicted as `l`. Zero denominator gives 0.
#[allow(clippy::needless_range_loop)]
pub fn mcc_literal(c: &[Vec<f64>]) -> f64 {
    let k = c.len();
    let mut num = 0.0;
    for a in 0..k {
        for b in 0..k {
            for m in 0..k {
                num += c[a][a] * c[b][m] - c[a][b] * c[m][a];
            }
        }
    }
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for a in 0..k {
        let row_a: f64 = (0..k).map(|l| c[a][l]).sum();
        let col_a: f64 = (0..k).map(|l| c[l][a]).sum();
        let mut row_rest = 0.0;
        let mut col_rest = 0.0;
        for b in 0..k {
            if b == a {
                continue;
            }
            for l in 0..k {
                row_rest += c[b][l];
                col_rest += c[l][b];
            }
        }
        d1 += row_a * row_rest;
        d2 += col_a * col_rest;
    }
    if d1 == 0.0 || d2 == 0.0 {
        0.0
    } else {
        num / (d1.sqrt() * d2.sqrt())
    }
}

/// Rows of the benchmark score fixture: (dataset, scores) plus the method
/// header.
pub fn benchmark_scores() -> (Vec<String>, Vec<(String, Vec<f64>)>) {
    let text = include_str!("../fixtures/benchmark_scores.tsv");
    let mut lines = text.lines();
    let methods = lines.next().unwrap().split('\t').skip(1).map(String::from).collect();
    let rows = lines
        .map(|l| {
            let mut cells = l.split('\t');
            let name = cells.next().unwrap().to_string();
            (name, cells.map(|c| c.parse().unwrap()).collect())
        })
        .collect();
    (methods, rows)
}

pub fn benchmark_table() -> vistabnet::metrics::ScoreTable {
    let (methods, rows) = benchmark_scores();
    let mut table = vistabnet::metrics::ScoreTable::new(rows.iter().map(|r| r.0.clone()).collect(), methods.clone());
    for (d, scores) in &rows {
        for (m, s) in methods.iter().zip(scores) {
            table.set(d, m, *s, None).unwrap();
        }
    }
    table
}

pub type Build = dyn Fn(&mut Tape<'_>, &[Var]) -> Var;

/// Scalar `Σ out ⊙ w` for a fixed random `w`, so every output entry
/// contributes with a distinct weight.
pub fn scalar_loss(inputs: &[Tensor], build: &Build, weights: &mut Option<Tensor>) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let w = weights
        .get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            Tensor::randn(tape.value(out).shape(), 1.0, &mut rng)
        })
        .clone();
    let wv = tape.leaf(w, false);
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod);
    let value = tape.value(loss).item().unwrap();
    tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    (value, grads)
}

/// Largest relative error between tape gradients and central differences
/// over every input of `build`.
pub fn op_gradient_error(inputs: Vec<Tensor>, build: &Build) -> f64 {
    let mut weights = None;
    let (_, analytic) = scalar_loss(&inputs, build, &mut weights);
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = finite_diff_grad(
            |probe| {
                let mut ins = inputs.clone();
                ins[i] = probe.clone();
                scalar_loss(&ins, build, &mut weights.clone()).0
            },
            &inputs[i],
            H,
        );
        worst = worst.max(max_relative_error(a, &numeric));
    }
    worst
}

/// Largest relative error between model parameter gradients and central
/// differences of the batch loss. Unused parameters count as zero.
pub fn model_gradient_error(model: &VisTabNetModel, x: &Tensor, y: &[usize]) -> f64 {
    let (_, grads) = loss_and_grads(model, x, y).unwrap();
    let params: Vec<Tensor> = model.parameters().into_iter().map(|(_, t)| t.clone()).collect();
    let mut worst: f64 = 0.0;
    for (i, p) in params.iter().enumerate() {
        let analytic = grads[i].clone().unwrap_or_else(|| Tensor::zeros(p.shape()));
        let numeric = finite_diff_grad(
            |probe| {
                let mut m = model.clone();
                *m.parameters_mut()[i].1 = probe.clone();
                loss_and_grads(&m, x, y).unwrap().0
            },
            p,
            H,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}
