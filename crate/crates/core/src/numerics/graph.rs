//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output; nodes only reference
//! earlier nodes, so the tape is topologically ordered by construction and
//! [`Graph::backward`] is a single reverse sweep.

use super::kernels;
use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<usize>,
    },
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add {
        a: NodeId,
        b: NodeId,
        broadcast: bool,
    },
    MulScalar {
        x: NodeId,
        s: NodeId,
    },
    Scale(NodeId, f32),
    Exp(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Gelu(NodeId),
    SoftmaxRow(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: Vec<usize>,
        heads: usize,
        causal: bool,
        probs: Vec<f32>,
    },
    ConcatRows(Vec<NodeId>),
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    MeanRows {
        x: NodeId,
        segments: Vec<usize>,
    },
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<f32>,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    TokenNll {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f32>,
        denom: f32,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded computation. Build it with the op methods, then call [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<(usize, NodeId)>,
}

impl Gradients {
    pub fn of(&self, node: NodeId) -> Option<&[f32]> {
        self.grads[node.0].as_deref()
    }

    /// `(param index, gradient)` for every parameter leaf reached by the sweep.
    /// A parameter with no path to the loss is reported with an all-zero gradient.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[f32])> + '_ {
        self.params
            .iter()
            .filter_map(|&(p, id)| self.grads[id.0].as_deref().map(|g| (p, g)))
    }
}

fn mismatch(msg: impl Into<String>) -> NumericsError {
    NumericsError::ShapeMismatch(msg.into())
}

fn segment_offsets(segments: &[usize]) -> Vec<usize> {
    let mut offs = Vec::with_capacity(segments.len());
    let mut o = 0;
    for &s in segments {
        offs.push(o);
        o += s;
    }
    offs
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf { param: None }, t, false)
    }

    /// A trainable leaf tied to parameter slot `index`.
    pub fn param(&mut self, index: usize, t: &Tensor) -> NodeId {
        let mut v = t.clone();
        v.clear_grad();
        self.push(Op::Leaf { param: Some(index) }, v, true)
    }

    /// A leaf that receives a gradient but is not an optimizer parameter.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf { param: None }, t, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if ta.shape().len() != 2 || tb.shape().len() != 2 || k != k2 {
            return Err(mismatch(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(&[m, n], out)?, rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n, k2) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if ta.shape().len() != 2 || tb.shape().len() != 2 || k != k2 {
            return Err(mismatch(format!(
                "matmul_nt {:?} x {:?}ᵀ",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMulNt(a, b), Tensor::new(&[m, n], out)?, rg))
    }

    /// Elementwise add; `b` may also be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let broadcast = if ta.shape() == tb.shape() {
            false
        } else if tb.numel() == ta.cols() && tb.rows() == 1 && !ta.shape().is_empty() {
            true
        } else {
            return Err(mismatch(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        };
        let c = ta.cols();
        let out: Vec<f32> = if broadcast {
            let mut out = ta.data().to_vec();
            for row in out.chunks_mut(c.max(1)) {
                row.iter_mut().zip(tb.data()).for_each(|(x, y)| *x += y);
            }
            out
        } else {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x + y)
                .collect()
        };
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add { a, b, broadcast }, Tensor::new(&shape, out)?, rg))
    }

    /// `x · s` where `s` is a one-element node.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, NumericsError> {
        if self.value(s).numel() != 1 {
            return Err(mismatch("mul_scalar expects a one-element scale"));
        }
        let sv = self.value(s).item();
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v * sv).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, s]);
        Ok(self.push(Op::MulScalar { x, s }, Tensor::new(&shape, out)?, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(tx.shape(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(Op::Scale(x, c), t, rg)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v.exp()).collect();
        let t = Tensor::new(tx.shape(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(Op::Exp(x), t, rg)
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NumericsError> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(mismatch(format!(
                "embedding id {bad} out of range for {v} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            Tensor::new(&[ids.len(), d], out)?,
            rg,
        ))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tg.numel() != c || tb.numel() != c || tx.shape().len() != 2 {
            return Err(mismatch(format!(
                "layer_norm {:?} with gamma {:?}",
                tx.shape(),
                tg.shape()
            )));
        }
        let mut xhat = vec![0.0; tx.numel()];
        let inv_std = kernels::layer_norm_rows(tx.data(), c, &mut xhat);
        let mut out = xhat.clone();
        for row in out.chunks_mut(c.max(1)) {
            for ((v, g), b) in row.iter_mut().zip(tg.data()).zip(tb.data()) {
                *v = *v * g + b;
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            Tensor::new(&shape, out)?,
            rg,
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let out = tx.data().iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(tx.shape(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(Op::Gelu(x), t, rg)
    }

    pub fn softmax_row(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            kernels::softmax_in_place(row);
        }
        let t = Tensor::new(tx.shape(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(Op::SoftmaxRow(x), t, rg)
    }

    /// Multi-head scaled dot-product attention over independent row segments.
    /// `q`, `k`, `v` are `[N×d]`; `segments` partitions the N rows into sequences.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: &[usize],
        heads: usize,
        causal: bool,
    ) -> Result<NodeId, NumericsError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (tq.rows(), tq.cols());
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() || heads == 0 || d % heads != 0 {
            return Err(mismatch(format!(
                "attention q{:?} k{:?} v{:?} heads {heads}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if segments.iter().sum::<usize>() != n {
            return Err(mismatch(format!(
                "attention segments sum to {} but {n} rows",
                segments.iter().sum::<usize>()
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::new();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for (&len, &off) in segments.iter().zip(&segment_offsets(segments)) {
            for h in 0..heads {
                let col = h * dh;
                let base = probs.len();
                probs.resize(base + len * len, 0.0);
                for i in 0..len {
                    let qi = &qd[(off + i) * d + col..(off + i) * d + col + dh];
                    let lim = if causal { i + 1 } else { len };
                    let prow = &mut probs[base + i * len..base + i * len + lim];
                    for (j, p) in prow.iter_mut().enumerate() {
                        *p = kernels::dot(qi, &kd[(off + j) * d + col..(off + j) * d + col + dh])
                            * scale;
                    }
                    kernels::softmax_in_place(prow);
                    let orow = &mut out[(off + i) * d + col..(off + i) * d + col + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        kernels::axpy(p, &vd[(off + j) * d + col..(off + j) * d + col + dh], orow);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        let op = Op::Attention {
            q,
            k,
            v,
            segments: segments.to_vec(),
            heads,
            causal,
            probs,
        };
        Ok(self.push(op, Tensor::new(&[n, d], out)?, rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let c = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| mismatch("concat_rows of nothing"))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c || t.shape().len() != 2 {
                return Err(mismatch(format!("concat_rows width {} vs {c}", t.cols())));
            }
            out.extend_from_slice(t.data());
            rows += t.rows();
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::new(&[rows, c], out)?,
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId, NumericsError> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(mismatch(format!("gather row {bad} of {r}")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(tx.row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            Tensor::new(&[idx.len(), c], out)?,
            rg,
        ))
    }

    /// Mean over rows; with several segments, one output row per segment.
    pub fn mean_rows(&mut self, x: NodeId, segments: &[usize]) -> Result<NodeId, NumericsError> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if segments.iter().sum::<usize>() != r || segments.contains(&0) {
            return Err(mismatch(format!(
                "mean_rows segments {segments:?} over {r} rows"
            )));
        }
        let mut out = vec![0.0; segments.len() * c];
        for (s, (&len, &off)) in segments.iter().zip(&segment_offsets(segments)).enumerate() {
            let o = &mut out[s * c..(s + 1) * c];
            for i in off..off + len {
                kernels::axpy(1.0, tx.row(i), o);
            }
            let inv = 1.0 / len as f32;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::MeanRows {
                x,
                segments: segments.to_vec(),
            },
            Tensor::new(&[segments.len(), c], out)?,
            rg,
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let c = tx.cols().max(1);
        let mut out = tx.data().to_vec();
        let mut norms = Vec::with_capacity(tx.rows());
        for row in out.chunks_mut(c) {
            let nrm = (kernels::dot(row, row) + 1e-12).sqrt();
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        let t = Tensor::new(tx.shape(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(Op::L2NormalizeRows { x, norms }, t, rg)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(mismatch(format!("transpose of {:?}", tx.shape())));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = tx.data()[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Transpose(x), Tensor::new(&[c, r], out)?, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, NumericsError> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Reshape(x), t, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f32 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    /// `Σ_t w_t · (−log softmax(logits_t)[target_t]) / denom`
    pub fn token_nll(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: &[f32],
        denom: f32,
    ) -> Result<NodeId, NumericsError> {
        let tl = self.value(logits);
        let (t, v) = (tl.rows(), tl.cols());
        if targets.len() != t || weights.len() != t || tl.shape().len() != 2 {
            return Err(mismatch(format!(
                "token_nll over {:?} with {} targets, {} weights",
                tl.shape(),
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&x| x >= v) {
            return Err(mismatch(format!("target {bad} outside {v} classes")));
        }
        let mut loss = 0.0f64;
        for i in 0..t {
            if weights[i] != 0.0 {
                let row = tl.row(i);
                let nll = kernels::log_sum_exp(row) - row[targets[i]];
                loss += f64::from(weights[i]) * f64::from(nll);
            }
        }
        let value = Tensor::scalar((loss / f64::from(denom)) as f32);
        let rg = self.rg(&[logits]);
        let op = Op::TokenNll {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            denom,
        };
        Ok(self.push(op, value, rg))
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumericsError> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NotScalarLoss(
                self.value(loss).shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(p) } => Some((p, NodeId(i))),
                _ => None,
            })
            .collect::<Vec<_>>();
        for &(_, id) in &params {
            if grads[id.0].is_none() {
                grads[id.0] = Some(vec![0.0; self.nodes[id.0].value.numel()]);
            }
        }
        Ok(Gradients { grads, params })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f32>>], id: NodeId) -> Option<&'a mut Vec<f32>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let n = self.nodes[id.0].value.numel();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    let bt = kernels::transpose(tb.data(), k, n);
                    kernels::matmul_acc(g, &bt, ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(ta.data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_acc(g, tb.data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(g, ta.data(), gb, m, n, k);
                }
            }
            Op::Add { a, b, broadcast } => {
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::axpy(1.0, g, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *broadcast {
                        let c = gb.len();
                        for row in g.chunks(c) {
                            kernels::axpy(1.0, row, gb);
                        }
                    } else {
                        kernels::axpy(1.0, g, gb);
                    }
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).item();
                if let Some(gx) = self.acc(grads, *x) {
                    kernels::axpy(sv, g, gx);
                }
                let dot = kernels::dot(g, self.value(*x).data());
                if let Some(gs) = self.acc(grads, *s) {
                    gs[0] += dot;
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    kernels::axpy(*c, g, gx);
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gi), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *o += gi * y;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        kernels::axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                let gam = self.value(*gamma).data().to_vec();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((o, &gi), &xh) in gg.iter_mut().zip(gr).zip(xr) {
                            *o += gi * xh;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for gr in g.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(o, &gi)| *o += gi);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxh = vec![0.0; c];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxh[j] = gr[j] * gam[j];
                        }
                        let s1: f32 = dxh.iter().sum();
                        let s2 = kernels::dot(&dxh, xr);
                        let cf = c as f32;
                        for j in 0..c {
                            gx[r * c + j] += is / cf * (cf * dxh[j] - s1 - xr[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gi), &xi) in gx.iter_mut().zip(g).zip(tx) {
                        *o += gi * kernels::gelu_grad(xi);
                    }
                }
            }
            Op::SoftmaxRow(x) => {
                let c = out.cols().max(1);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((yr, gr), or) in
                        out.data().chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c))
                    {
                        let s = kernels::dot(yr, gr);
                        for j in 0..c {
                            or[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                causal,
                probs,
            } => {
                self.attention_backward(g, grads, (*q, *k, *v), segments, *heads, *causal, probs);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if let Some(gp) = self.acc(grads, *p) {
                        kernels::axpy(1.0, &g[off..off + n], gp);
                    }
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        kernels::axpy(1.0, &g[r * c..(r + 1) * c], &mut gx[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::MeanRows { x, segments } => {
                let c = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (s, (&len, &off)) in
                        segments.iter().zip(&segment_offsets(segments)).enumerate()
                    {
                        let inv = 1.0 / len as f32;
                        for i in off..off + len {
                            kernels::axpy(inv, &g[s * c..(s + 1) * c], &mut gx[i * c..(i + 1) * c]);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = out.cols().max(1);
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let yr = &out.data()[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let s = kernels::dot(yr, gr);
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * s) / nrm;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.rows(), out.cols());
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    kernels::axpy(1.0, g, gx);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::TokenNll {
                logits,
                targets,
                weights,
                denom,
            } => {
                let tl = self.value(*logits);
                let v = tl.cols();
                let logits_data = tl.data().to_vec();
                if let Some(gl) = self.acc(grads, *logits) {
                    let mut p = vec![0.0; v];
                    for (i, (&tgt, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        p.copy_from_slice(&logits_data[i * v..(i + 1) * v]);
                        kernels::softmax_in_place(&mut p);
                        p[tgt] -= 1.0;
                        kernels::axpy(g[0] * w / denom, &p, &mut gl[i * v..(i + 1) * v]);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
        (q, k, v): (NodeId, NodeId, NodeId),
        segments: &[usize],
        heads: usize,
        causal: bool,
        probs: &[f32],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (tq.rows(), tq.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut base = 0;
        let mut dp = Vec::new();
        for (&len, &off) in segments.iter().zip(&segment_offsets(segments)) {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..len {
                    let lim = if causal { i + 1 } else { len };
                    let prow = &probs[base + i * len..base + i * len + lim];
                    let go = &g[(off + i) * d + col..(off + i) * d + col + dh];
                    dp.clear();
                    dp.extend((0..lim).map(|j| {
                        kernels::dot(go, &vd[(off + j) * d + col..(off + j) * d + col + dh])
                    }));
                    let s = kernels::dot(prow, &dp);
                    for j in 0..lim {
                        let ds = prow[j] * (dp[j] - s) * scale;
                        let rj = (off + j) * d + col;
                        let ri = (off + i) * d + col;
                        kernels::axpy(prow[j], go, &mut dv[rj..rj + dh]);
                        if ds != 0.0 {
                            kernels::axpy(ds, &kd[rj..rj + dh], &mut dq[ri..ri + dh]);
                            kernels::axpy(ds, &qd[ri..ri + dh], &mut dk[rj..rj + dh]);
                        }
                    }
                }
                base += len * len;
            }
        }
        for (id, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gx) = self.acc(grads, id) {
                kernels::axpy(1.0, &buf, gx);
            }
        }
    }
}
