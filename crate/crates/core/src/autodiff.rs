//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its variables. Leaves are
//! either owned tensors or borrowed model weights (no copy), and carry a
//! `tracked` flag. An operation is tracked when any of its inputs is;
//! [`Tape::backward`] walks the record in exact reverse order and leaves
//! gradients only on tracked leaves.
//!
//! ```
//! use vistabnet::autodiff::Tape;
//! use vistabnet::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{gelu_grad_scalar, gelu_scalar, matmul_dims, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Interleave {
        prefix: Option<Var>,
        views: Vec<Var>,
    },
    AddPositional {
        x: Var,
        pos: Var,
        seq: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        seg: usize,
        skip: usize,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    tracked: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Operation record for one forward pass.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    consumed: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.push(Cow::Owned(value), tracked, Op::Leaf)
    }

    /// Records a borrowed tensor (typically a model weight) without copying it.
    pub fn leaf_ref(&mut self, value: &'a Tensor, tracked: bool) -> Var {
        self.push(Cow::Borrowed(value), tracked, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient of a leaf after [`Tape::backward`]; `None` for untracked
    /// values and for leaves the loss does not depend on.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        self.nodes[v.0]
            .grad
            .take()
            .map(|g| Tensor::new(shape, g).expect("grad shape"))
    }

    fn push(&mut self, value: Cow<'a, Tensor>, tracked: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            tracked,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.push(Cow::Owned(value), tracked, op)
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(Error::contract("tape already consumed by backward"))
        } else {
            Ok(())
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(out, &[a, b], Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!("add of {:?} and {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_op(out, &[a, b], Op::Add(a, b)))
    }

    /// Adds a length-`C` vector to every row of an `R×C` value.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_open()?;
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.numel() != c {
            return Err(Error::dim(format!("bias of {:?} for rows of width {c}", bv.shape())));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push_op(out, &[x, bias], Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!("mul of {:?} and {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_op(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push_op(out, &[x], Op::Scale(x, factor))
    }

    /// Exact-erf GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_scalar(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push_op(out, &[x], Op::Gelu(x))
    }

    /// Standardizes every row over the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.check_open()?;
        if eps <= 0.0 {
            return Err(Error::contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::dim(format!(
                "layer_norm over width {d} with gain {:?} and bias {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push_op(
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Row-wise softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(xv.cols().max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push_op(out, &[x], Op::Softmax(x))
    }

    /// Mean softmax cross-entropy of `B×K` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check_open()?;
        let lv = self.value(logits);
        let (b, k) = match lv.shape() {
            [b, k] => (*b, *k),
            s => return Err(Error::dim(format!("cross_entropy expects [B, K] logits, got {s:?}"))),
        };
        if labels.len() != b {
            return Err(Error::dim(format!("{} labels for {b} rows", labels.len())));
        }
        if let Some((i, &bad)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Index(format!("label {bad} at row {i} outside [0, {k})")));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(k).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[r]];
            softmax_in_place(row);
        }
        let out = Tensor::scalar(loss / b as f64);
        Ok(self.push_op(
            out,
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push_op(Tensor::scalar(total), &[x], Op::Sum(x))
    }

    /// Scaled dot-product self-attention over `batch` sequences of `seq`
    /// tokens. `q`, `k`, `v` are `(batch·seq)×D` with heads laid out as
    /// contiguous `D/heads` column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        self.check_open()?;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(Error::dim(format!(
                "attention q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if qv.rows() != batch * seq {
            return Err(Error::dim(format!(
                "attention over {} rows for batch {batch} x seq {seq}",
                qv.rows()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; qv.numel()];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            let base = b * seq;
            for h in 0..heads {
                let off = h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for s in 0..seq {
                    let qrow = &qd[(base + s) * d + off..(base + s) * d + off + dh];
                    let prow = &mut p[s * seq..(s + 1) * seq];
                    for (t, slot) in prow.iter_mut().enumerate() {
                        let krow = &kd[(base + t) * d + off..(base + t) * d + off + dh];
                        let mut acc = 0.0;
                        for (a, c) in qrow.iter().zip(krow) {
                            acc += a * c;
                        }
                        *slot = acc * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(base + s) * d + off..(base + s) * d + off + dh];
                    for (t, &w) in prow.iter().enumerate() {
                        let vrow = &vd[(base + t) * d + off..(base + t) * d + off + dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(qv.shape().to_vec(), out)?;
        Ok(self.push_op(
            out,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Builds `B` token sequences from an optional shared first row
    /// (`1×D`) followed by one row from each `B×D` view, so that the result
    /// is `(B·S)×D` with `S = views + [prefix]` and row `b·S + s` holding
    /// token `s` of sequence `b`.
    pub fn interleave(&mut self, prefix: Option<Var>, views: &[Var]) -> Result<Var> {
        self.check_open()?;
        let first = views
            .first()
            .ok_or_else(|| Error::contract("interleave needs at least one view"))?;
        let (batch, d) = match self.value(*first).shape() {
            [b, d] => (*b, *d),
            s => return Err(Error::dim(format!("view must be [B, D], got {s:?}"))),
        };
        for v in views {
            if self.value(*v).shape() != [batch, d] {
                return Err(Error::dim(format!(
                    "view {:?} differs from [{batch}, {d}]",
                    self.value(*v).shape()
                )));
            }
        }
        if let Some(p) = prefix {
            if self.value(p).numel() != d {
                return Err(Error::dim(format!("prefix {:?} for width {d}", self.value(p).shape())));
            }
        }
        let lead = usize::from(prefix.is_some());
        let seq = views.len() + lead;
        let mut data = vec![0.0; batch * seq * d];
        for b in 0..batch {
            if let Some(p) = prefix {
                data[b * seq * d..(b * seq + 1) * d].copy_from_slice(self.value(p).data());
            }
            for (i, v) in views.iter().enumerate() {
                let dst = (b * seq + lead + i) * d;
                data[dst..dst + d].copy_from_slice(self.value(*v).row(b));
            }
        }
        let out = Tensor::new(vec![batch * seq, d], data)?;
        let mut inputs = views.to_vec();
        inputs.extend(prefix);
        Ok(self.push_op(
            out,
            &inputs,
            Op::Interleave {
                prefix,
                views: views.to_vec(),
            },
        ))
    }

    /// Adds rows `0..seq` of `pos` to every length-`seq` sequence in `x`.
    pub fn add_positional(&mut self, x: Var, pos: Var, seq: usize) -> Result<Var> {
        self.check_open()?;
        let (xv, pv) = (self.value(x), self.value(pos));
        let d = xv.cols();
        if pv.cols() != d || pv.rows() < seq {
            return Err(Error::Capacity {
                needed: seq,
                max_seq: pv.rows(),
            });
        }
        if seq == 0 || xv.rows() % seq != 0 {
            return Err(Error::dim(format!(
                "{} rows is not a whole number of length-{seq} sequences",
                xv.rows()
            )));
        }
        let mut data = xv.data().to_vec();
        for (r, row) in data.chunks_mut(d).enumerate() {
            let p = pv.row(r % seq);
            for (o, a) in row.iter_mut().zip(p) {
                *o += a;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push_op(out, &[x, pos], Op::AddPositional { x, pos, seq }))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.check_open()?;
        let xv = self.value(x);
        let d = xv.cols();
        if let Some(bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(Error::Index(format!("row {bad} of {}", xv.rows())));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push_op(out, &[x], Op::SelectRows { x, rows: rows.to_vec() }))
    }

    /// Mean of rows `skip..seg` within each consecutive block of `seg` rows.
    pub fn segment_mean(&mut self, x: Var, seg: usize, skip: usize) -> Result<Var> {
        self.check_open()?;
        let xv = self.value(x);
        let d = xv.cols();
        if seg == 0 || skip >= seg || !xv.rows().is_multiple_of(seg) {
            return Err(Error::dim(format!(
                "segment_mean of {} rows with segment {seg}, skip {skip}",
                xv.rows()
            )));
        }
        let groups = xv.rows() / seg;
        let count = (seg - skip) as f64;
        let mut data = vec![0.0; groups * d];
        for g in 0..groups {
            let dst = &mut data[g * d..(g + 1) * d];
            for r in skip..seg {
                for (o, v) in dst.iter_mut().zip(xv.row(g * seg + r)) {
                    *o += v;
                }
            }
            for o in dst.iter_mut() {
                *o /= count;
            }
        }
        let out = Tensor::new(vec![groups, d], data)?;
        Ok(self.push_op(out, &[x], Op::SegmentMean { x, seg, skip }))
    }

    /// Propagates gradients from a scalar `loss` back to every tracked leaf.
    /// The tape is consumed: a second call, or any further recording, errors.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_open()?;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = node.grad.take() else {
                continue;
            };
            propagate(before, node, &g);
            node.op = Op::Leaf;
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn accumulate(nodes: &mut [Node<'_>], v: Var, contribution: &[f64]) {
    let node = &mut nodes[v.0];
    if !node.tracked {
        return;
    }
    match &mut node.grad {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        None => node.grad = Some(contribution.to_vec()),
    }
}

fn wants(nodes: &[Node<'_>], v: Var) -> bool {
    nodes[v.0].tracked
}

fn propagate(before: &mut [Node<'_>], node: &Node<'_>, g: &[f64]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k, n) = matmul_dims(before[a.0].value.shape(), before[b.0].value.shape()).expect("dims");
            if wants(before, *a) {
                let mut da = vec![0.0; m * k];
                matmul_nt_into(g, before[b.0].value.data(), &mut da, m, n, k);
                accumulate(before, *a, &da);
            }
            if wants(before, *b) {
                let mut db = vec![0.0; k * n];
                matmul_tn_into(before[a.0].value.data(), g, &mut db, m, k, n);
                accumulate(before, *b, &db);
            }
        }
        Op::Add(a, b) => {
            accumulate(before, *a, g);
            accumulate(before, *b, g);
        }
        Op::AddBias(x, bias) => {
            accumulate(before, *x, g);
            if wants(before, *bias) {
                let c = before[bias.0].value.numel();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    for (o, v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate(before, *bias, &db);
            }
        }
        Op::Mul(a, b) => {
            if wants(before, *a) {
                let da: Vec<f64> = g.iter().zip(before[b.0].value.data()).map(|(x, y)| x * y).collect();
                accumulate(before, *a, &da);
            }
            if wants(before, *b) {
                let db: Vec<f64> = g.iter().zip(before[a.0].value.data()).map(|(x, y)| x * y).collect();
                accumulate(before, *b, &db);
            }
        }
        Op::Scale(x, f) => {
            let dx: Vec<f64> = g.iter().map(|v| v * f).collect();
            accumulate(before, *x, &dx);
        }
        Op::Gelu(x) => {
            let dx: Vec<f64> = g
                .iter()
                .zip(before[x.0].value.data())
                .map(|(gv, &xv)| gv * gelu_grad_scalar(xv))
                .collect();
            accumulate(before, *x, &dx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = before[gain.0].value.numel();
            if wants(before, *x) {
                let gd = before[gain.0].value.data();
                let mut dx = vec![0.0; g.len()];
                for (r, &s) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gd[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gd[j];
                        dx[r * d + j] = s * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                accumulate(before, *x, &dx);
            }
            if wants(before, *gain) {
                let mut dg = vec![0.0; d];
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                    }
                }
                accumulate(before, *gain, &dg);
            }
            if wants(before, *bias) {
                let mut db = vec![0.0; d];
                for gr in g.chunks(d) {
                    for (o, v) in db.iter_mut().zip(gr) {
                        *o += v;
                    }
                }
                accumulate(before, *bias, &db);
            }
        }
        Op::Softmax(x) => {
            let p = node.value.data();
            let k = node.value.cols().max(1);
            let mut dx = vec![0.0; g.len()];
            for ((dr, gr), pr) in dx.chunks_mut(k).zip(g.chunks(k)).zip(p.chunks(k)) {
                let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for j in 0..k {
                    dr[j] = pr[j] * (gr[j] - dot);
                }
            }
            accumulate(before, *x, &dx);
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let b = labels.len();
            let k = probs.len() / b.max(1);
            let scale = g[0] / b as f64;
            let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (r, &l) in labels.iter().enumerate() {
                dl[r * k + l] -= scale;
            }
            accumulate(before, *logits, &dl);
        }
        Op::Sum(x) => {
            let dx = vec![g[0]; before[x.0].value.numel()];
            accumulate(before, *x, &dx);
        }
        Op::Attention {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            probs,
        } => {
            let (batch, seq, heads) = (*batch, *seq, *heads);
            let d = node.value.cols();
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let qd = before[q.0].value.data();
            let kd = before[k.0].value.data();
            let vd = before[v.0].value.data();
            let mut dq = vec![0.0; g.len()];
            let mut dk = vec![0.0; g.len()];
            let mut dv = vec![0.0; g.len()];
            let mut dp = vec![0.0; seq];
            for b in 0..batch {
                let base = b * seq;
                for h in 0..heads {
                    let off = h * dh;
                    let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                    for s in 0..seq {
                        let prow = &p[s * seq..(s + 1) * seq];
                        let grow = &g[(base + s) * d + off..(base + s) * d + off + dh];
                        for t in 0..seq {
                            let vrow = &vd[(base + t) * d + off..(base + t) * d + off + dh];
                            let mut acc = 0.0;
                            for (a, c) in grow.iter().zip(vrow) {
                                acc += a * c;
                            }
                            dp[t] = acc;
                            let dvrow = &mut dv[(base + t) * d + off..(base + t) * d + off + dh];
                            for (o, gv) in dvrow.iter_mut().zip(grow) {
                                *o += prow[t] * gv;
                            }
                        }
                        let dot: f64 = prow.iter().zip(&dp).map(|(a, c)| a * c).sum();
                        for t in 0..seq {
                            let ds = prow[t] * (dp[t] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = &kd[(base + t) * d + off..(base + t) * d + off + dh];
                            let qrow = &qd[(base + s) * d + off..(base + s) * d + off + dh];
                            let dqrow = &mut dq[(base + s) * d + off..(base + s) * d + off + dh];
                            for (o, kv) in dqrow.iter_mut().zip(krow) {
                                *o += ds * kv;
                            }
                            let dkrow = &mut dk[(base + t) * d + off..(base + t) * d + off + dh];
                            for (o, qv) in dkrow.iter_mut().zip(qrow) {
                                *o += ds * qv;
                            }
                        }
                    }
                }
            }
            accumulate(before, *q, &dq);
            accumulate(before, *k, &dk);
            accumulate(before, *v, &dv);
        }
        Op::Interleave { prefix, views } => {
            let d = node.value.cols();
            let lead = usize::from(prefix.is_some());
            let seq = views.len() + lead;
            let batch = node.value.rows() / seq;
            for (i, view) in views.iter().enumerate() {
                if !wants(before, *view) {
                    continue;
                }
                let mut dv = vec![0.0; batch * d];
                for b in 0..batch {
                    let src = (b * seq + lead + i) * d;
                    dv[b * d..(b + 1) * d].copy_from_slice(&g[src..src + d]);
                }
                accumulate(before, *view, &dv);
            }
            if let Some(p) = prefix {
                if wants(before, *p) {
                    let mut dp = vec![0.0; d];
                    for b in 0..batch {
                        for (o, v) in dp.iter_mut().zip(&g[b * seq * d..(b * seq + 1) * d]) {
                            *o += v;
                        }
                    }
                    accumulate(before, *p, &dp);
                }
            }
        }
        Op::AddPositional { x, pos, seq } => {
            accumulate(before, *x, g);
            if wants(before, *pos) {
                let d = node.value.cols();
                let mut dp = vec![0.0; before[pos.0].value.numel()];
                for (r, row) in g.chunks(d).enumerate() {
                    let s = r % seq;
                    for (o, v) in dp[s * d..(s + 1) * d].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate(before, *pos, &dp);
            }
        }
        Op::SelectRows { x, rows } => {
            if wants(before, *x) {
                let d = node.value.cols();
                let mut dx = vec![0.0; before[x.0].value.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for (o, v) in dx[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *o += v;
                    }
                }
                accumulate(before, *x, &dx);
            }
        }
        Op::SegmentMean { x, seg, skip } => {
            if wants(before, *x) {
                let d = node.value.cols();
                let count = (seg - skip) as f64;
                let mut dx = vec![0.0; before[x.0].value.numel()];
                for (grp, grow) in g.chunks(d).enumerate() {
                    for r in *skip..*seg {
                        let dst = &mut dx[(grp * seg + r) * d..(grp * seg + r + 1) * d];
                        for (o, v) in dst.iter_mut().zip(grow) {
                            *o += v / count;
                        }
                    }
                }
                accumulate(before, *x, &dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn recording_after_backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(tape.add(x, x).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn untracked_leaves_get_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let w = tape.leaf(Tensor::vector(vec![3.0, 4.0]), false);
        let p = tape.mul(x, w).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0; 4]), false);
        let p = tape.softmax(x);
        assert_eq!(tape.value(p).data(), &[0.25; 4]);
        let y = tape.leaf(Tensor::vector(vec![1000.0, 0.0]), false);
        let q = tape.softmax(y);
        let qv = tape.value(q).data();
        assert!(qv.iter().all(|v| v.is_finite()));
        assert!((qv[0] - 1.0).abs() < 1e-12 && qv[1] < 1e-300);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4]), false);
        let loss = tape.cross_entropy(x, &[2]).unwrap();
        assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_goes_to_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[&[800.0, 0.0, 0.0]]).unwrap(), false);
        let loss = tape.cross_entropy(x, &[0]).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-300);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3]), false);
        assert!(matches!(tape.cross_entropy(x, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn layer_norm_constant_row_maps_to_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![5.0; 4]), false);
        let g = tape.leaf(Tensor::vector(vec![1.0; 4]), false);
        let b = tape.leaf(Tensor::vector(vec![0.0; 4]), false);
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 3.0]), false);
        let g = tape.leaf(Tensor::vector(vec![1.0; 2]), false);
        let b = tape.leaf(Tensor::vector(vec![0.0; 2]), false);
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-10 && (v[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn layer_norm_width_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 4]), false);
        let g = tape.leaf(Tensor::zeros(&[3]), false);
        let b = tape.leaf(Tensor::zeros(&[4]), false);
        assert!(matches!(tape.layer_norm(x, g, b, 1e-6), Err(Error::Dimension(_))));
    }

    #[test]
    fn interleave_places_prefix_then_views() {
        let mut tape = Tape::new();
        let cls = tape.leaf(Tensor::vector(vec![9.0, 9.0]), false);
        let v1 = tape.leaf(Tensor::from_rows(&[&[1.0, 1.0], &[2.0, 2.0]]).unwrap(), false);
        let v2 = tape.leaf(Tensor::from_rows(&[&[3.0, 3.0], &[4.0, 4.0]]).unwrap(), false);
        let s = tape.interleave(Some(cls), &[v1, v2]).unwrap();
        assert_eq!(
            tape.value(s).data(),
            &[9.0, 9.0, 1.0, 1.0, 3.0, 3.0, 9.0, 9.0, 2.0, 2.0, 4.0, 4.0]
        );
    }
}
