//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A forward pass pushes nodes onto a [`Tape`]; `backward` walks the tape in
//! reverse and accumulates gradients for every parameter leaf. The op set is
//! exactly what the codec and sequence models need; each op's gradient is
//! covered by a finite-difference test below.

use crate::error::{Error, Result};
use crate::mat::{sigmoid, silu, Mat};
use crate::params::{ParamId, ParamStore};
use std::collections::HashMap;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvTSpec {
    pub stride: usize,
    pub pad: usize,
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Silu(NodeId),
    Abs(NodeId),
    Sqr(NodeId),
    Ln(NodeId),
    LayerNormRows(NodeId, f64),
    Transpose(NodeId),
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    Conv1d(NodeId, NodeId, ConvSpec),
    ConvT1d(NodeId, NodeId, ConvTSpec),
    DepthwiseConv1d(NodeId, NodeId, usize, usize),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        from: Vec<usize>,
        to: Vec<usize>,
        probs: Vec<Mat>,
    },
    FrameSignal(NodeId, usize, usize),
    SumAll(NodeId),
    MeanAll(NodeId),
    CrossEntropyRows {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Mat,
    },
}

struct Node {
    op: Op,
    value: Mat,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every parameter leaf used by
/// the tape, indexed by [`ParamId`].
pub struct Grads {
    pub by_param: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.by_param.get(id).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Mat, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Leaf node for a trainable parameter; memoized so each parameter has a
    /// single node per tape and repeated uses accumulate gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&nid) = self.param_nodes.get(&id) {
            return nid;
        }
        let requires = store.is_trainable(id);
        let nid = self.push(Op::Leaf, store.value(id).clone(), requires);
        self.param_nodes.insert(id, nid);
        nid
    }

    /// Leaf node for a constant: no gradient flows into it.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.cols, bv.rows, "matmul inner dims");
        let (m, k, n) = (av.rows, av.cols, bv.cols);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            for p in 0..k {
                let x = av.at(i, p);
                if x == 0.0 {
                    continue;
                }
                let brow = bv.row(p);
                let orow = out.row_mut(i);
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), out, rg)
    }

    fn broadcast_ok(a: &Mat, b: &Mat) -> bool {
        a.shape() == b.shape() || (b.rows == 1 && b.cols == a.cols)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert!(Self::broadcast_ok(av, bv), "add shapes {:?} {:?}", av.shape(), bv.shape());
        let mut out = av.clone();
        for r in 0..out.rows {
            let br = if bv.rows == 1 { 0 } else { r };
            for c in 0..out.cols {
                *out.at_mut(r, c) += bv.at(br, c);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), out, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert!(Self::broadcast_ok(av, bv), "sub shapes {:?} {:?}", av.shape(), bv.shape());
        let mut out = av.clone();
        for r in 0..out.rows {
            let br = if bv.rows == 1 { 0 } else { r };
            for c in 0..out.cols {
                *out.at_mut(r, c) -= bv.at(br, c);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), out, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert!(Self::broadcast_ok(av, bv), "mul shapes {:?} {:?}", av.shape(), bv.shape());
        let mut out = av.clone();
        for r in 0..out.rows {
            let br = if bv.rows == 1 { 0 } else { r };
            for c in 0..out.cols {
                *out.at_mut(r, c) *= bv.at(br, c);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), out, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.nodes[a].value.map(|v| v * c);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), out, rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.nodes[a].value.map(|v| v + c);
        let rg = self.rg(a);
        self.push(Op::AddScalar(a), out, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(f64::tanh);
        let rg = self.rg(a);
        self.push(Op::Tanh(a), out, rg)
    }

    pub fn sigmoid_node(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(sigmoid);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), out, rg)
    }

    pub fn silu_node(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(silu);
        let rg = self.rg(a);
        self.push(Op::Silu(a), out, rg)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(f64::abs);
        let rg = self.rg(a);
        self.push(Op::Abs(a), out, rg)
    }

    pub fn sqr(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(|v| v * v);
        let rg = self.rg(a);
        self.push(Op::Sqr(a), out, rg)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(f64::ln);
        let rg = self.rg(a);
        self.push(Op::Ln(a), out, rg)
    }

    /// Per-row standardization to zero mean and unit variance. Affine gain
    /// and bias are composed outside with `mul`/`add` row broadcasts.
    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let av = &self.nodes[a].value;
        let n = av.cols as f64;
        let mut out = av.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let rg = self.rg(a);
        self.push(Op::LayerNormRows(a, eps), out, rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.transpose();
        let rg = self.rg(a);
        self.push(Op::Transpose(a), out, rg)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.cols, bv.cols, "concat_rows col mismatch");
        let mut data = av.data.clone();
        data.extend_from_slice(&bv.data);
        let out = Mat::from_vec(av.rows + bv.rows, av.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::ConcatRows(a, b), out, rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.rows, bv.rows, "concat_cols row mismatch");
        let mut out = Mat::zeros(av.rows, av.cols + bv.cols);
        for r in 0..av.rows {
            out.row_mut(r)[..av.cols].copy_from_slice(av.row(r));
            out.row_mut(r)[av.cols..].copy_from_slice(bv.row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::ConcatCols(a, b), out, rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let av = &self.nodes[a].value;
        assert!(from <= to && to <= av.rows, "slice_rows bounds");
        let out = Mat::from_vec(
            to - from,
            av.cols,
            av.data[from * av.cols..to * av.cols].to_vec(),
        );
        let rg = self.rg(a);
        self.push(Op::SliceRows(a, from, to), out, rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let av = &self.nodes[a].value;
        assert!(from <= to && to <= av.cols, "slice_cols bounds");
        let mut out = Mat::zeros(av.rows, to - from);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[from..to]);
        }
        let rg = self.rg(a);
        self.push(Op::SliceCols(a, from, to), out, rg)
    }

    /// Row gather: used both for embedding lookup (gather from a parameter
    /// table) and for strided or permuted row selection.
    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let av = &self.nodes[a].value;
        let mut out = Mat::zeros(indices.len(), av.cols);
        for (r, &i) in indices.iter().enumerate() {
            assert!(i < av.rows, "gather_rows index {i} out of {}", av.rows);
            out.row_mut(r).copy_from_slice(av.row(i));
        }
        let rg = self.rg(a);
        self.push(Op::GatherRows(a, indices), out, rg)
    }

    /// 1-D convolution. `x` is time×in_ch, `w` is out_ch×(in_ch·kernel).
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, spec: ConvSpec) -> NodeId {
        let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
        assert_eq!(xv.cols, spec.in_ch);
        assert_eq!(wv.rows, spec.out_ch);
        assert_eq!(wv.cols, spec.in_ch * spec.kernel);
        let t_in = xv.rows;
        let span = t_in + spec.pad_left + spec.pad_right;
        assert!(span >= spec.kernel, "conv1d input shorter than kernel");
        let t_out = (span - spec.kernel) / spec.stride + 1;
        let mut out = Mat::zeros(t_out, spec.out_ch);
        for t in 0..t_out {
            let base = t * spec.stride;
            for dk in 0..spec.kernel {
                let ti = base + dk;
                if ti < spec.pad_left || ti - spec.pad_left >= t_in {
                    continue;
                }
                let xrow = xv.row(ti - spec.pad_left);
                for co in 0..spec.out_ch {
                    let wrow = wv.row(co);
                    let mut acc = 0.0;
                    for ci in 0..spec.in_ch {
                        acc += xrow[ci] * wrow[ci * spec.kernel + dk];
                    }
                    *out.at_mut(t, co) += acc;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(Op::Conv1d(x, w, spec), out, rg)
    }

    /// Transposed 1-D convolution. `x` is time×in_ch, `w` is in_ch×(out_ch·kernel).
    /// Output length is (T−1)·stride + kernel − 2·pad.
    pub fn conv_transpose1d(&mut self, x: NodeId, w: NodeId, spec: ConvTSpec) -> NodeId {
        let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
        assert_eq!(xv.cols, spec.in_ch);
        assert_eq!(wv.rows, spec.in_ch);
        assert_eq!(wv.cols, spec.out_ch * spec.kernel);
        let t_in = xv.rows;
        let t_out = (t_in - 1) * spec.stride + spec.kernel - 2 * spec.pad;
        let mut out = Mat::zeros(t_out, spec.out_ch);
        for ti in 0..t_in {
            let xrow = xv.row(ti);
            for dk in 0..spec.kernel {
                let pos = ti * spec.stride + dk;
                if pos < spec.pad || pos - spec.pad >= t_out {
                    continue;
                }
                let orow = out.row_mut(pos - spec.pad);
                for ci in 0..spec.in_ch {
                    let xval = xrow[ci];
                    if xval == 0.0 {
                        continue;
                    }
                    let wrow = wv.row(ci);
                    for co in 0..spec.out_ch {
                        orow[co] += xval * wrow[co * spec.kernel + dk];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(Op::ConvT1d(x, w, spec), out, rg)
    }

    /// Depthwise 1-D convolution: `x` is time×ch, `w` is ch×kernel.
    pub fn depthwise_conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        pad_left: usize,
        pad_right: usize,
    ) -> NodeId {
        let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
        assert_eq!(xv.cols, wv.rows, "depthwise channel mismatch");
        let kernel = wv.cols;
        let t_in = xv.rows;
        let t_out = t_in + pad_left + pad_right + 1 - kernel;
        let mut out = Mat::zeros(t_out, xv.cols);
        for t in 0..t_out {
            for dk in 0..kernel {
                let ti = t + dk;
                if ti < pad_left || ti - pad_left >= t_in {
                    continue;
                }
                let xrow = xv.row(ti - pad_left);
                let orow = out.row_mut(t);
                for c in 0..xv.cols {
                    orow[c] += xrow[c] * wv.at(c, dk);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(Op::DepthwiseConv1d(x, w, pad_left, pad_right), out, rg)
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// q/k/v (each rows×H with H = heads·head_dim). Row i attends to
    /// rows `from[i]..to[i]`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        from: Vec<usize>,
        to: Vec<usize>,
    ) -> NodeId {
        let (qv, kv, vv) = (
            &self.nodes[q].value,
            &self.nodes[k].value,
            &self.nodes[v].value,
        );
        let (t, h_dim) = qv.shape();
        assert_eq!(kv.shape(), (t, h_dim));
        assert_eq!(vv.shape(), (t, h_dim));
        assert_eq!(h_dim % heads, 0, "hidden dim not divisible by heads");
        assert_eq!(from.len(), t);
        assert_eq!(to.len(), t);
        let dh = h_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(t, h_dim);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = Mat::zeros(t, t);
            for i in 0..t {
                let (lo, hi) = (from[i], to[i]);
                assert!(lo < hi && hi <= t, "attention window empty or out of range");
                let qrow = &qv.row(i)[off..off + dh];
                let mut scores = Vec::with_capacity(hi - lo);
                for j in lo..hi {
                    let krow = &kv.row(j)[off..off + dh];
                    let mut s = 0.0;
                    for d in 0..dh {
                        s += qrow[d] * krow[d];
                    }
                    scores.push(s * scale);
                }
                crate::mat::softmax_in_place(&mut scores);
                for (idx, j) in (lo..hi).enumerate() {
                    *p.at_mut(i, j) = scores[idx];
                    let vrow = &vv.row(j)[off..off + dh];
                    let orow = &mut out.row_mut(i)[off..off + dh];
                    for d in 0..dh {
                        orow[d] += scores[idx] * vrow[d];
                    }
                }
            }
            probs.push(p);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                from,
                to,
                probs,
            },
            out,
            rg,
        )
    }

    /// Slice a length×1 signal into overlapping frames (frames × size).
    pub fn frame_signal(&mut self, x: NodeId, size: usize, hop: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.cols, 1, "frame_signal expects a column vector");
        let len = xv.rows;
        assert!(len >= size, "signal shorter than frame size");
        let n = 1 + (len - size) / hop;
        let mut out = Mat::zeros(n, size);
        for f in 0..n {
            for j in 0..size {
                *out.at_mut(f, j) = xv.at(f * hop + j, 0);
            }
        }
        let rg = self.rg(x);
        self.push(Op::FrameSignal(x, size, hop), out, rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data.iter().sum();
        let rg = self.rg(a);
        self.push(Op::SumAll(a), Mat::from_vec(1, 1, vec![s]), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a].value;
        let s: f64 = v.data.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Op::MeanAll(a), Mat::from_vec(1, 1, vec![s]), rg)
    }

    /// Mean cross-entropy (nats) between rows of logits and target indices.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let lv = &self.nodes[logits].value;
        assert_eq!(lv.rows, targets.len(), "one target per logits row");
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            assert!(target < lv.cols, "target out of range");
            let row = probs.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
            total += sum.ln() + max - lv.at(r, target);
        }
        let mean = total / targets.len() as f64;
        let rg = self.rg(logits);
        self.push(
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            },
            Mat::from_vec(1, 1, vec![mean]),
            rg,
        )
    }

    /// Reverse pass from a scalar loss node. Returns per-parameter gradients.
    pub fn backward(&self, loss: NodeId, store: &ParamStore) -> Result<Grads> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called on an empty tape".into()));
        }
        if loss >= self.nodes.len() {
            return Err(Error::Usage("backward: loss node out of range".into()));
        }
        if self.nodes[loss].value.shape() != (1, 1) {
            return Err(Error::Usage("backward: loss must be a scalar node".into()));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for nid in (0..=loss).rev() {
            if !self.nodes[nid].requires_grad {
                grads[nid] = None;
                continue;
            }
            if matches!(self.nodes[nid].op, Op::Leaf) {
                continue; // keep the accumulated gradient for collection
            }
            let g = match grads[nid].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(nid, &g, &mut grads);
        }

        let mut by_param: Vec<Option<Mat>> = (0..store.len()).map(|_| None).collect();
        for (&pid, &nid) in &self.param_nodes {
            if let Some(g) = &grads[nid] {
                by_param[pid] = Some(g.clone());
            }
        }
        Ok(Grads { by_param })
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], id: NodeId, delta: Mat) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, nid: NodeId, g: &Mat, grads: &mut [Option<Mat>]) {
        match &self.nodes[nid].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.rg(*a) {
                    // dA = g · Bᵀ
                    let mut da = Mat::zeros(av.rows, av.cols);
                    for i in 0..av.rows {
                        for j in 0..bv.cols {
                            let gv = g.at(i, j);
                            if gv == 0.0 {
                                continue;
                            }
                            let brow_t = j; // column j of B
                            for p in 0..av.cols {
                                *da.at_mut(i, p) += gv * bv.at(p, brow_t);
                            }
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · g
                    let mut db = Mat::zeros(bv.rows, bv.cols);
                    for i in 0..av.rows {
                        let arow = av.row(i);
                        let grow = g.row(i);
                        for p in 0..av.cols {
                            let aval = arow[p];
                            if aval == 0.0 {
                                continue;
                            }
                            let dbrow = db.row_mut(p);
                            for j in 0..g.cols {
                                dbrow[j] += aval * grow[j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.reduce_to_shape(g, *b));
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    let mut d = self.reduce_to_shape(g, *b);
                    for v in d.data.iter_mut() {
                        *v = -*v;
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.rg(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows {
                        let br = if bv.rows == 1 { 0 } else { r };
                        for c in 0..da.cols {
                            *da.at_mut(r, c) *= bv.at(br, c);
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut full = g.clone();
                    for r in 0..full.rows {
                        for c in 0..full.cols {
                            *full.at_mut(r, c) *= av.at(r, c);
                        }
                    }
                    let d = self.reduce_mat_to_shape(&full, bv.shape());
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.map(|v| v * c));
                }
            }
            Op::AddScalar(a) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
            }
            Op::Tanh(a) => {
                if self.rg(*a) {
                    let y = &self.nodes[nid].value;
                    let mut d = g.clone();
                    for (dv, yv) in d.data.iter_mut().zip(&y.data) {
                        *dv *= 1.0 - yv * yv;
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::Sigmoid(a) => {
                if self.rg(*a) {
                    let y = &self.nodes[nid].value;
                    let mut d = g.clone();
                    for (dv, yv) in d.data.iter_mut().zip(&y.data) {
                        *dv *= yv * (1.0 - yv);
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::Silu(a) => {
                if self.rg(*a) {
                    let x = &self.nodes[*a].value;
                    let mut d = g.clone();
                    for (dv, xv) in d.data.iter_mut().zip(&x.data) {
                        let s = sigmoid(*xv);
                        *dv *= s * (1.0 + xv * (1.0 - s));
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::Abs(a) => {
                if self.rg(*a) {
                    let x = &self.nodes[*a].value;
                    let mut d = g.clone();
                    for (dv, xv) in d.data.iter_mut().zip(&x.data) {
                        *dv *= if *xv > 0.0 {
                            1.0
                        } else if *xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::Sqr(a) => {
                if self.rg(*a) {
                    let x = &self.nodes[*a].value;
                    let mut d = g.clone();
                    for (dv, xv) in d.data.iter_mut().zip(&x.data) {
                        *dv *= 2.0 * xv;
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::Ln(a) => {
                if self.rg(*a) {
                    let x = &self.nodes[*a].value;
                    let mut d = g.clone();
                    for (dv, xv) in d.data.iter_mut().zip(&x.data) {
                        *dv /= xv;
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::LayerNormRows(a, eps) => {
                if self.rg(*a) {
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[nid].value;
                    let n = x.cols as f64;
                    let mut d = Mat::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let xrow = x.row(r);
                        let yrow = y.row(r);
                        let grow = g.row(r);
                        let mean = xrow.iter().sum::<f64>() / n;
                        let var =
                            xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean = grow.iter().sum::<f64>() / n;
                        let gy_mean = grow
                            .iter()
                            .zip(yrow)
                            .map(|(gv, yv)| gv * yv)
                            .sum::<f64>()
                            / n;
                        let drow = d.row_mut(r);
                        for c in 0..x.cols {
                            drow[c] = inv * (grow[c] - g_mean - yrow[c] * gy_mean);
                        }
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.transpose());
                }
            }
            Op::ConcatRows(a, b) => {
                let ar = self.nodes[*a].value.rows;
                if self.rg(*a) {
                    let d = Mat::from_vec(ar, g.cols, g.data[..ar * g.cols].to_vec());
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = Mat::from_vec(g.rows - ar, g.cols, g.data[ar * g.cols..].to_vec());
                    self.accumulate(grads, *b, d);
                }
            }
            Op::ConcatCols(a, b) => {
                let ac = self.nodes[*a].value.cols;
                if self.rg(*a) {
                    let mut d = Mat::zeros(g.rows, ac);
                    for r in 0..g.rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let mut d = Mat::zeros(g.rows, g.cols - ac);
                    for r in 0..g.rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::SliceRows(a, from, _to) => {
                if self.rg(*a) {
                    let av = &self.nodes[*a].value;
                    let mut d = Mat::zeros(av.rows, av.cols);
                    for r in 0..g.rows {
                        d.row_mut(from + r).copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::SliceCols(a, from, _to) => {
                if self.rg(*a) {
                    let av = &self.nodes[*a].value;
                    let mut d = Mat::zeros(av.rows, av.cols);
                    for r in 0..g.rows {
                        d.row_mut(r)[*from..*from + g.cols].copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::GatherRows(a, indices) => {
                if self.rg(*a) {
                    let av = &self.nodes[*a].value;
                    let mut d = Mat::zeros(av.rows, av.cols);
                    for (r, &i) in indices.iter().enumerate() {
                        let drow = d.row_mut(i);
                        for (dv, gv) in drow.iter_mut().zip(g.row(r)) {
                            *dv += gv;
                        }
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::Conv1d(x, w, spec) => {
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let t_in = xv.rows;
                let want_x = self.rg(*x);
                let want_w = self.rg(*w);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                let mut dw = Mat::zeros(wv.rows, wv.cols);
                for t in 0..g.rows {
                    let base = t * spec.stride;
                    for dk in 0..spec.kernel {
                        let ti = base + dk;
                        if ti < spec.pad_left || ti - spec.pad_left >= t_in {
                            continue;
                        }
                        let src = ti - spec.pad_left;
                        for co in 0..spec.out_ch {
                            let gv = g.at(t, co);
                            if gv == 0.0 {
                                continue;
                            }
                            for ci in 0..spec.in_ch {
                                if want_x {
                                    *dx.at_mut(src, ci) +=
                                        gv * wv.at(co, ci * spec.kernel + dk);
                                }
                                if want_w {
                                    *dw.at_mut(co, ci * spec.kernel + dk) +=
                                        gv * xv.at(src, ci);
                                }
                            }
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, dx);
                }
                if want_w {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::ConvT1d(x, w, spec) => {
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let t_out = g.rows;
                let want_x = self.rg(*x);
                let want_w = self.rg(*w);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                let mut dw = Mat::zeros(wv.rows, wv.cols);
                for ti in 0..xv.rows {
                    for dk in 0..spec.kernel {
                        let pos = ti * spec.stride + dk;
                        if pos < spec.pad || pos - spec.pad >= t_out {
                            continue;
                        }
                        let grow = g.row(pos - spec.pad);
                        for ci in 0..spec.in_ch {
                            for co in 0..spec.out_ch {
                                let gv = grow[co];
                                if gv == 0.0 {
                                    continue;
                                }
                                if want_x {
                                    *dx.at_mut(ti, ci) += gv * wv.at(ci, co * spec.kernel + dk);
                                }
                                if want_w {
                                    *dw.at_mut(ci, co * spec.kernel + dk) +=
                                        gv * xv.at(ti, ci);
                                }
                            }
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, dx);
                }
                if want_w {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::DepthwiseConv1d(x, w, pad_left, _pad_right) => {
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let kernel = wv.cols;
                let t_in = xv.rows;
                let want_x = self.rg(*x);
                let want_w = self.rg(*w);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                let mut dw = Mat::zeros(wv.rows, wv.cols);
                for t in 0..g.rows {
                    for dk in 0..kernel {
                        let ti = t + dk;
                        if ti < *pad_left || ti - pad_left >= t_in {
                            continue;
                        }
                        let src = ti - pad_left;
                        let grow = g.row(t);
                        for c in 0..xv.cols {
                            let gv = grow[c];
                            if gv == 0.0 {
                                continue;
                            }
                            if want_x {
                                *dx.at_mut(src, c) += gv * wv.at(c, dk);
                            }
                            if want_w {
                                *dw.at_mut(c, dk) += gv * xv.at(src, c);
                            }
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, dx);
                }
                if want_w {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                from,
                to,
                probs,
            } => {
                let (qv, kv, vv) = (
                    &self.nodes[*q].value,
                    &self.nodes[*k].value,
                    &self.nodes[*v].value,
                );
                let (t, h_dim) = qv.shape();
                let dh = h_dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Mat::zeros(t, h_dim);
                let mut dk_m = Mat::zeros(t, h_dim);
                let mut dv_m = Mat::zeros(t, h_dim);
                for h in 0..*heads {
                    let off = h * dh;
                    let p = &probs[h];
                    for i in 0..t {
                        let (lo, hi) = (from[i], to[i]);
                        let grow = &g.row(i)[off..off + dh];
                        // dP and softmax backward over the allowed window.
                        let mut dp = Vec::with_capacity(hi - lo);
                        for j in lo..hi {
                            let vrow = &vv.row(j)[off..off + dh];
                            let mut s = 0.0;
                            for d in 0..dh {
                                s += grow[d] * vrow[d];
                            }
                            dp.push(s);
                        }
                        let mut dot_pd = 0.0;
                        for (idx, j) in (lo..hi).enumerate() {
                            dot_pd += p.at(i, j) * dp[idx];
                        }
                        let qrow: Vec<f64> = qv.row(i)[off..off + dh].to_vec();
                        for (idx, j) in (lo..hi).enumerate() {
                            let pij = p.at(i, j);
                            // dV
                            {
                                let dvrow = &mut dv_m.row_mut(j)[off..off + dh];
                                for d in 0..dh {
                                    dvrow[d] += pij * grow[d];
                                }
                            }
                            let ds = pij * (dp[idx] - dot_pd) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow: Vec<f64> = kv.row(j)[off..off + dh].to_vec();
                            {
                                let dqrow = &mut dq.row_mut(i)[off..off + dh];
                                for d in 0..dh {
                                    dqrow[d] += ds * krow[d];
                                }
                            }
                            {
                                let dkrow = &mut dk_m.row_mut(j)[off..off + dh];
                                for d in 0..dh {
                                    dkrow[d] += ds * qrow[d];
                                }
                            }
                        }
                    }
                }
                if self.rg(*q) {
                    self.accumulate(grads, *q, dq);
                }
                if self.rg(*k) {
                    self.accumulate(grads, *k, dk_m);
                }
                if self.rg(*v) {
                    self.accumulate(grads, *v, dv_m);
                }
            }
            Op::FrameSignal(x, size, hop) => {
                if self.rg(*x) {
                    let xv = &self.nodes[*x].value;
                    let mut d = Mat::zeros(xv.rows, 1);
                    for f in 0..g.rows {
                        for j in 0..*size {
                            *d.at_mut(f * hop + j, 0) += g.at(f, j);
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::SumAll(a) => {
                if self.rg(*a) {
                    let av = &self.nodes[*a].value;
                    let gv = g.at(0, 0);
                    self.accumulate(grads, *a, Mat::from_fn(av.rows, av.cols, |_, _| gv));
                }
            }
            Op::MeanAll(a) => {
                if self.rg(*a) {
                    let av = &self.nodes[*a].value;
                    let gv = g.at(0, 0) / av.len() as f64;
                    self.accumulate(grads, *a, Mat::from_fn(av.rows, av.cols, |_, _| gv));
                }
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            } => {
                if self.rg(*logits) {
                    let gv = g.at(0, 0) / targets.len() as f64;
                    let mut d = probs.clone();
                    for (r, &target) in targets.iter().enumerate() {
                        *d.at_mut(r, target) -= 1.0;
                    }
                    for v in d.data.iter_mut() {
                        *v *= gv;
                    }
                    self.accumulate(grads, *logits, d);
                }
            }
        }
    }

    /// Reduce a gradient to the (possibly row-broadcast) shape of node `b`.
    fn reduce_to_shape(&self, g: &Mat, b: NodeId) -> Mat {
        self.reduce_mat_to_shape(g, self.nodes[b].value.shape())
    }

    fn reduce_mat_to_shape(&self, g: &Mat, shape: (usize, usize)) -> Mat {
        if g.shape() == shape {
            return g.clone();
        }
        assert_eq!(shape.0, 1);
        assert_eq!(shape.1, g.cols);
        let mut d = Mat::zeros(1, g.cols);
        for r in 0..g.rows {
            for c in 0..g.cols {
                *d.at_mut(0, c) += g.at(r, c);
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences against tape gradients, one parameter
    /// coordinate at a time. `build` must evaluate the full forward from the
    /// store to a scalar loss node.
    fn fd_check(
        store: &mut ParamStore,
        build: impl Fn(&mut Tape, &ParamStore) -> NodeId,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store);
        let grads = tape.backward(loss, store).unwrap();
        let h = 1e-5;
        for pid in 0..store.len() {
            let n = store.value(pid).len();
            for i in 0..n {
                let orig = store.value(pid).data[i];
                store.value_mut(pid).data[i] = orig + h;
                let mut tp = Tape::new();
                let lp = build(&mut tp, store);
                let fp = tp.value(lp).at(0, 0);
                store.value_mut(pid).data[i] = orig - h;
                let mut tm = Tape::new();
                let lm = build(&mut tm, store);
                let fm = tm.value(lm).at(0, 0);
                store.value_mut(pid).data[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = grads.get(pid).map(|g| g.data[i]).unwrap_or(0.0);
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "param {pid}[{i}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn fd_matmul_add_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add("a", rand_mat(&mut rng, 3, 4));
        store.add("b", rand_mat(&mut rng, 4, 2));
        store.add("bias", rand_mat(&mut rng, 1, 2));
        fd_check(
            &mut store,
            |t, s| {
                let a = t.param(s, 0);
                let b = t.param(s, 1);
                let bias = t.param(s, 2);
                let mm = t.matmul(a, b);
                let ab = t.add(mm, bias);
                let th = t.tanh(ab);
                let si = t.silu_node(th);
                let sg = t.sigmoid_node(si);
                t.sum_all(sg)
            },
            1e-5,
        );
    }

    #[test]
    fn fd_elementwise_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        store.add("x", rand_mat(&mut rng, 2, 5));
        store.add("y", rand_mat(&mut rng, 2, 5));
        fd_check(
            &mut store,
            |t, s| {
                let x = t.param(s, 0);
                let y = t.param(s, 1);
                let m = t.mul(x, y);
                let sq = t.sqr(m);
                let sc = t.scale(sq, 0.7);
                let a = t.add_scalar(sc, 2.0);
                let l = t.ln(a);
                let d = t.sub(l, y);
                let ab = t.abs(d);
                t.mean_all(ab)
            },
            1e-4,
        );
    }

    #[test]
    fn fd_layer_norm_and_broadcast_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add("x", rand_mat(&mut rng, 3, 6));
        store.add("gain", rand_mat(&mut rng, 1, 6));
        store.add("bias", rand_mat(&mut rng, 1, 6));
        fd_check(
            &mut store,
            |t, s| {
                let x = t.param(s, 0);
                let gain = t.param(s, 1);
                let bias = t.param(s, 2);
                let ln = t.layer_norm_rows(x, 1e-6);
                let sc = t.mul(ln, gain);
                let sh = t.add(sc, bias);
                let sq = t.sqr(sh);
                t.sum_all(sq)
            },
            1e-4,
        );
    }

    #[test]
    fn fd_attention_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.add("q", rand_mat(&mut rng, 4, 6));
        store.add("k", rand_mat(&mut rng, 4, 6));
        store.add("v", rand_mat(&mut rng, 4, 6));
        store.add("w", rand_mat(&mut rng, 6, 3));
        fd_check(
            &mut store,
            |t, s| {
                let q = t.param(s, 0);
                let k = t.param(s, 1);
                let v = t.param(s, 2);
                let w = t.param(s, 3);
                let from = vec![0; 4];
                let to = (1..=4).collect();
                let at = t.attention(q, k, v, 2, from, to);
                let o = t.matmul(at, w);
                let sq = t.sqr(o);
                t.sum_all(sq)
            },
            1e-4,
        );
    }

    #[test]
    fn fd_conv_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.add("x", rand_mat(&mut rng, 8, 2));
        store.add("w", rand_mat(&mut rng, 3, 2 * 3));
        store.add("wt", rand_mat(&mut rng, 3, 2 * 4));
        store.add("wd", rand_mat(&mut rng, 2, 3));
        fd_check(
            &mut store,
            |t, s| {
                let x = t.param(s, 0);
                let w = t.param(s, 1);
                let wt = t.param(s, 2);
                let wd = t.param(s, 3);
                let c = t.conv1d(
                    x,
                    w,
                    ConvSpec {
                        stride: 2,
                        pad_left: 1,
                        pad_right: 1,
                        kernel: 3,
                        in_ch: 2,
                        out_ch: 3,
                    },
                );
                let ct = t.conv_transpose1d(
                    c,
                    wt,
                    ConvTSpec {
                        stride: 2,
                        pad: 1,
                        kernel: 4,
                        in_ch: 3,
                        out_ch: 2,
                    },
                );
                let dw = t.depthwise_conv1d(ct, wd, 2, 0);
                let sq = t.sqr(dw);
                t.sum_all(sq)
            },
            1e-4,
        );
    }

    #[test]
    fn fd_gather_slice_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        store.add("table", rand_mat(&mut rng, 5, 3));
        store.add("x", rand_mat(&mut rng, 4, 3));
        fd_check(
            &mut store,
            |t, s| {
                let table = t.param(s, 0);
                let x = t.param(s, 1);
                let e = t.gather_rows(table, vec![2, 0, 2, 4]);
                let cat = t.concat_cols(e, x);
                let trn = t.transpose(cat);
                let sl = t.slice_rows(trn, 1, 5);
                let sl2 = t.slice_cols(sl, 0, 3);
                let cr = t.concat_rows(sl2, sl2);
                let sq = t.sqr(cr);
                t.sum_all(sq)
            },
            1e-4,
        );
    }

    #[test]
    fn fd_cross_entropy_and_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.add("logits", rand_mat(&mut rng, 4, 5));
        store.add("sig", rand_mat(&mut rng, 10, 1));
        fd_check(
            &mut store,
            |t, s| {
                let logits = t.param(s, 0);
                let sig = t.param(s, 1);
                let ce = t.cross_entropy_rows(logits, vec![1, 0, 4, 2]);
                let frames = t.frame_signal(sig, 4, 2);
                let sq = t.sqr(frames);
                let se = t.sum_all(sq);
                let sesc = t.scale(se, 0.1);
                t.add(ce, sesc)
            },
            1e-4,
        );
    }

    #[test]
    fn constant_leaves_get_no_grad() {
        let mut store = ParamStore::new();
        store.add("x", Mat::from_vec(1, 2, vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, 0);
        let c = tape.constant(Mat::from_vec(1, 2, vec![5.0, 5.0]));
        let sum = tape.add(x, c);
        let loss = tape.sum_all(sum);
        let grads = tape.backward(loss, &store).unwrap();
        assert_eq!(grads.get(0).unwrap().data, vec![1.0, 1.0]);
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut store = ParamStore::new();
        store.add("x", Mat::from_vec(1, 2, vec![1.0, 2.0]));
        store.add("y", Mat::from_vec(1, 2, vec![3.0, 4.0]));
        store.set_trainable(1, false);
        let mut tape = Tape::new();
        let x = tape.param(&store, 0);
        let y = tape.param(&store, 1);
        let m = tape.mul(x, y);
        let loss = tape.sum_all(m);
        let grads = tape.backward(loss, &store).unwrap();
        assert!(grads.get(0).is_some());
        assert!(grads.get(1).is_none());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut store = ParamStore::new();
        store.add("x", Mat::from_vec(2, 2, vec![1.0; 4]));
        let mut tape = Tape::new();
        let x = tape.param(&store, 0);
        assert!(tape.backward(x, &store).is_err());
        let empty = Tape::new();
        assert!(empty.backward(0, &store).is_err());
    }

    #[test]
    fn repeated_param_use_accumulates() {
        let mut store = ParamStore::new();
        store.add("x", Mat::from_vec(1, 1, vec![3.0]));
        let mut tape = Tape::new();
        let x1 = tape.param(&store, 0);
        let x2 = tape.param(&store, 0);
        assert_eq!(x1, x2);
        let prod = tape.mul(x1, x2); // x²
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss, &store).unwrap();
        assert!((grads.get(0).unwrap().data[0] - 6.0).abs() < 1e-12);
    }
}
