//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The op set is exactly what the transformer stacks, the losses, and the
//! embedding/pooling plumbing need. Nodes are appended in topological
//! order, so the backward pass is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

enum Op<F: Scalar> {
    Leaf,
    MatMul,
    Transpose,
    /// Elementwise sum of two same-shape tensors.
    Add,
    /// `x[T,C] + v[C]` broadcast over rows.
    AddRow,
    /// `x[T,C] * v[C]` broadcast over rows.
    MulRow,
    Scale(f64),
    Gelu,
    /// inputs `[x, gain, bias]`; per-row normalization.
    LayerNorm {
        inv_std: Vec<F>,
        xhat: Tensor<F>,
    },
    SoftmaxRows,
    SliceCols {
        from: usize,
    },
    ConcatCols,
    /// Adaptive mean pooling over rows.
    AvgPoolRows,
    /// inputs are `Q` embedding tables `[(K+1), d]`; output row `t` is the
    /// sum over stages of `table_q[idx[q*T+t]]`.
    EmbedSum {
        indices: Vec<u32>,
        frames: usize,
    },
    SumAll,
    /// inputs are `Q` logit tensors `[T, K]`; scalar mean NLL over the
    /// masked positions. `probs` caches softmax rows of masked positions
    /// as `(input_index, frame, row)`.
    MaskedCe {
        targets: Vec<u32>,
        masked_count: usize,
        probs: Vec<(usize, usize, Vec<F>)>,
    },
    /// Mean squared error against a constant target.
    MseVs {
        target: Tensor<F>,
    },
}

struct Node<F: Scalar> {
    op: Op<F>,
    inputs: Vec<NodeId>,
    value: Tensor<F>,
    param: Option<String>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    param_ids: HashMap<String, NodeId>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_val<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_ids: HashMap::new(),
        }
    }

    fn push(&mut self, op: Op<F>, inputs: Vec<NodeId>, value: Tensor<F>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            param: None,
        });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    /// Bind a named parameter as a leaf. Repeated binds of the same name
    /// return the original node so gradients accumulate in one place.
    pub fn param(&mut self, name: &str, value: &Tensor<F>) -> NodeId {
        if let Some(&id) = self.param_ids.get(name) {
            return id;
        }
        let id = self.push(Op::Leaf, vec![], value.clone());
        self.nodes[id.0].param = Some(name.to_string());
        self.param_ids.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = crate::tensor::matmul(self.value(a), self.value(b));
        self.push(Op::MatMul, vec![a, b], value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = crate::tensor::transpose(self.value(a));
        self.push(Op::Transpose, vec![a], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        self.push(Op::Add, vec![a, b], value)
    }

    pub fn add_row(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (vx, vv) = (self.value(x), self.value(v));
        let cols = vx.cols();
        assert_eq!(vv.numel(), cols, "add_row width mismatch");
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (o, &b) in row.iter_mut().zip(vv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data);
        self.push(Op::AddRow, vec![x, v], value)
    }

    pub fn mul_row(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (vx, vv) = (self.value(x), self.value(v));
        let cols = vx.cols();
        assert_eq!(vv.numel(), cols, "mul_row width mismatch");
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (o, &b) in row.iter_mut().zip(vv.data()) {
                *o *= b;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data);
        self.push(Op::MulRow, vec![x, v], value)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let fc = F::from_f64(c);
        let value = self.value(x).map(|v| v * fc);
        self.push(Op::Scale(c), vec![x], value)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(gelu_val);
        self.push(Op::Gelu, vec![x], value)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let vx = self.value(x);
        let (t, d) = (vx.rows(), vx.cols());
        assert_eq!(self.value(gain).numel(), d);
        assert_eq!(self.value(bias).numel(), d);
        let feps = F::from_f64(eps);
        let fd = F::from_f64(d as f64);
        let mut xhat = vec![F::zero(); t * d];
        let mut inv_std = vec![F::zero(); t];
        for r in 0..t {
            let row = vx.row(r);
            let mut mean = F::zero();
            for &v in row {
                mean += v;
            }
            mean /= fd;
            let mut var = F::zero();
            for &v in row {
                let dmu = v - mean;
                var += dmu * dmu;
            }
            var /= fd;
            let is = (var + feps).sqrt().recip();
            inv_std[r] = is;
            for (j, &v) in row.iter().enumerate() {
                xhat[r * d + j] = (v - mean) * is;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![F::zero(); t * d];
        for r in 0..t {
            for j in 0..d {
                out[r * d + j] = g[j] * xhat[r * d + j] + b[j];
            }
        }
        let xhat = Tensor::new(vec![t, d], xhat);
        let value = Tensor::new(vec![t, d], out);
        self.push(Op::LayerNorm { inv_std, xhat }, vec![x, gain, bias], value)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let cols = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(vx.shape().to_vec(), data);
        self.push(Op::SoftmaxRows, vec![x], value)
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let vx = self.value(x);
        let (t, c) = (vx.rows(), vx.cols());
        assert!(from < to && to <= c, "slice_cols range {from}..{to} of {c}");
        let w = to - from;
        let mut data = Vec::with_capacity(t * w);
        for r in 0..t {
            data.extend_from_slice(&vx.row(r)[from..to]);
        }
        let value = Tensor::new(vec![t, w], data);
        self.push(Op::SliceCols { from }, vec![x], value)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let t = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(t * total);
        for r in 0..t {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![t, total], data);
        self.push(Op::ConcatCols, parts.to_vec(), value)
    }

    /// Adaptive average pooling over rows: output row `t` is the mean of
    /// input rows `[floor(t*T_in/T_out), ceil((t+1)*T_in/T_out))`.
    pub fn avg_pool_rows(&mut self, x: NodeId, t_out: usize) -> NodeId {
        assert!(t_out >= 1, "avg_pool_rows needs t_out >= 1");
        let vx = self.value(x);
        let (t_in, c) = (vx.rows(), vx.cols());
        let mut data = vec![F::zero(); t_out * c];
        for t in 0..t_out {
            let (s, e) = pool_window(t, t_in, t_out);
            let len = F::from_f64((e - s) as f64);
            for r in s..e {
                let row = vx.row(r);
                for j in 0..c {
                    data[t * c + j] += row[j];
                }
            }
            for j in 0..c {
                data[t * c + j] /= len;
            }
        }
        let value = Tensor::new(vec![t_out, c], data);
        self.push(Op::AvgPoolRows, vec![x], value)
    }

    /// Sum of per-stage embedding lookups. `tables[q]` has `K+1` rows; the
    /// index grid is stage-major (`indices[q*frames + t]`).
    pub fn embed_sum(&mut self, tables: &[NodeId], indices: Vec<u32>, frames: usize) -> NodeId {
        let stages = tables.len();
        assert_eq!(indices.len(), stages * frames);
        let d = self.value(tables[0]).cols();
        let mut data = vec![F::zero(); frames * d];
        for (q, &tab) in tables.iter().enumerate() {
            let vt = self.value(tab);
            let rows = vt.rows();
            for t in 0..frames {
                let idx = indices[q * frames + t] as usize;
                assert!(idx < rows, "embedding index {idx} out of range {rows}");
                let row = vt.row(idx);
                for j in 0..d {
                    data[t * d + j] += row[j];
                }
            }
        }
        let value = Tensor::new(vec![frames, d], data);
        self.push(Op::EmbedSum { indices, frames }, tables.to_vec(), value)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = F::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        self.push(Op::SumAll, vec![x], Tensor::scalar(s))
    }

    /// Mean negative log-softmax of the target class over masked positions.
    /// `logits[q]` is `[T, K]`; `targets` and `mask` are stage-major `Q*T`.
    /// Returns the loss node plus a flag that is true when the mask was
    /// empty (the loss is then defined as zero).
    pub fn masked_cross_entropy(
        &mut self,
        logits: &[NodeId],
        targets: &[u32],
        mask: &[bool],
    ) -> (NodeId, bool) {
        let stages = logits.len();
        let frames = self.value(logits[0]).rows();
        assert_eq!(targets.len(), stages * frames);
        assert_eq!(mask.len(), stages * frames);
        let mut probs = Vec::new();
        let mut loss = F::zero();
        let mut masked_count = 0usize;
        for (q, &ln) in logits.iter().enumerate() {
            let v = self.value(ln);
            let k = v.cols();
            for t in 0..frames {
                if !mask[q * frames + t] {
                    continue;
                }
                let target = targets[q * frames + t] as usize;
                assert!(target < k, "target {target} out of vocab {k}");
                let mut row = v.row(t).to_vec();
                softmax_in_place(&mut row);
                loss += -(row[target].max(F::from_f64(1e-300))).ln();
                probs.push((q, t, row));
                masked_count += 1;
            }
        }
        let empty = masked_count == 0;
        if !empty {
            loss /= F::from_f64(masked_count as f64);
        }
        let id = self.push(
            Op::MaskedCe {
                targets: targets.to_vec(),
                masked_count,
                probs,
            },
            logits.to_vec(),
            Tensor::scalar(loss),
        );
        (id, empty)
    }

    pub fn mse_vs(&mut self, pred: NodeId, target: Tensor<F>) -> NodeId {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "mse_vs shape mismatch");
        let n = F::from_f64(vp.numel() as f64);
        let mut s = F::zero();
        for (&p, &t) in vp.data().iter().zip(target.data()) {
            let d = p - t;
            s += d * d;
        }
        let value = Tensor::scalar(s / n);
        self.push(Op::MseVs { target }, vec![pred], value)
    }

    /// Error if the node holds any non-finite value.
    pub fn check_finite(&self, id: NodeId, context: &str) -> Result<()> {
        if self.value(id).all_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!("non-finite activation in {context}")))
        }
    }

    /// Reverse sweep from a scalar loss. Returns per-parameter gradients;
    /// parameters never touched by the graph are absent (callers fill in
    /// zeros against their full parameter set).
    pub fn backward(&self, loss: NodeId) -> HashMap<String, Tensor<F>> {
        assert_eq!(self.value(loss).numel(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }

        let mut out = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                if let Some(g) = grads[i].take() {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }

    fn grad_slot<'g>(
        &self,
        grads: &'g mut [Option<Tensor<F>>],
        id: NodeId,
    ) -> &'g mut Tensor<F> {
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[id.0].value.shape().to_vec()));
        }
        slot.as_mut().unwrap()
    }

    fn backprop_node(&self, i: usize, gout: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let a = self.value(ins[0]);
                let b = self.value(ins[1]);
                matmul_bt_into(gout, b, self.grad_slot(grads, ins[0]));
                matmul_at_into(a, gout, self.grad_slot(grads, ins[1]));
            }
            Op::Transpose => {
                let t = crate::tensor::transpose(gout);
                add_into(self.grad_slot(grads, ins[0]), &t);
            }
            Op::Add => {
                add_into(self.grad_slot(grads, ins[0]), gout);
                add_into(self.grad_slot(grads, ins[1]), gout);
            }
            Op::AddRow => {
                add_into(self.grad_slot(grads, ins[0]), gout);
                let cols = self.value(ins[1]).numel();
                let g = self.grad_slot(grads, ins[1]);
                for row in gout.data().chunks(cols) {
                    for (o, &v) in g.data_mut().iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            Op::MulRow => {
                let x = self.value(ins[0]);
                let v = self.value(ins[1]);
                let cols = v.numel();
                {
                    let g = self.grad_slot(grads, ins[0]);
                    for (grow, orow) in g.data_mut().chunks_mut(cols).zip(gout.data().chunks(cols))
                    {
                        for ((gi, &oi), &vi) in grow.iter_mut().zip(orow).zip(v.data()) {
                            *gi += oi * vi;
                        }
                    }
                }
                let g = self.grad_slot(grads, ins[1]);
                for (xrow, orow) in x.data().chunks(cols).zip(gout.data().chunks(cols)) {
                    for ((gi, &oi), &xi) in g.data_mut().iter_mut().zip(orow).zip(xrow) {
                        *gi += oi * xi;
                    }
                }
            }
            Op::Scale(c) => {
                let fc = F::from_f64(*c);
                let g = self.grad_slot(grads, ins[0]);
                for (o, &v) in g.data_mut().iter_mut().zip(gout.data()) {
                    *o += v * fc;
                }
            }
            Op::Gelu => {
                let x = self.value(ins[0]);
                let g = self.grad_slot(grads, ins[0]);
                for ((o, &v), &xi) in g.data_mut().iter_mut().zip(gout.data()).zip(x.data()) {
                    *o += v * gelu_grad(xi);
                }
            }
            Op::LayerNorm { inv_std, xhat } => {
                let gain = self.value(ins[1]).data().to_vec();
                let (t, d) = (xhat.rows(), xhat.cols());
                let fd = F::from_f64(d as f64);
                {
                    let g = self.grad_slot(grads, ins[0]);
                    let mut dxhat = vec![F::zero(); d];
                    for r in 0..t {
                        let dy = &gout.data()[r * d..(r + 1) * d];
                        let xh = xhat.row(r);
                        let is = inv_std[r];
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..d {
                            dxhat[j] = dy[j] * gain[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xh[j];
                        }
                        m1 /= fd;
                        m2 /= fd;
                        let grow = &mut g.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            grow[j] += is * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
                {
                    let g = self.grad_slot(grads, ins[1]);
                    for r in 0..t {
                        let dy = &gout.data()[r * d..(r + 1) * d];
                        let xh = xhat.row(r);
                        for j in 0..d {
                            g.data_mut()[j] += dy[j] * xh[j];
                        }
                    }
                }
                let g = self.grad_slot(grads, ins[2]);
                for r in 0..t {
                    let dy = &gout.data()[r * d..(r + 1) * d];
                    for j in 0..d {
                        g.data_mut()[j] += dy[j];
                    }
                }
            }
            Op::SoftmaxRows => {
                let y = &node.value;
                let cols = y.cols();
                let g = self.grad_slot(grads, ins[0]);
                for ((grow, yrow), orow) in g
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(y.data().chunks(cols))
                    .zip(gout.data().chunks(cols))
                {
                    let mut dot = F::zero();
                    for (&yi, &oi) in yrow.iter().zip(orow) {
                        dot += yi * oi;
                    }
                    for ((gi, &yi), &oi) in grow.iter_mut().zip(yrow).zip(orow) {
                        *gi += yi * (oi - dot);
                    }
                }
            }
            Op::SliceCols { from, .. } => {
                let w = node.value.cols();
                let c = self.value(ins[0]).cols();
                let from = *from;
                let g = self.grad_slot(grads, ins[0]);
                for (r, orow) in gout.data().chunks(w).enumerate() {
                    let grow = &mut g.data_mut()[r * c + from..r * c + from + w];
                    for (gi, &oi) in grow.iter_mut().zip(orow) {
                        *gi += oi;
                    }
                }
            }
            Op::ConcatCols => {
                let total = node.value.cols();
                let mut offset = 0usize;
                for &input in ins {
                    let w = self.value(input).cols();
                    let g = self.grad_slot(grads, input);
                    let gw = g.cols();
                    for (r, grow) in g.data_mut().chunks_mut(gw).enumerate() {
                        let orow = &gout.data()[r * total + offset..r * total + offset + w];
                        for (gi, &oi) in grow.iter_mut().zip(orow) {
                            *gi += oi;
                        }
                    }
                    offset += w;
                }
            }
            Op::AvgPoolRows => {
                let t_out = node.value.rows();
                let c = node.value.cols();
                let t_in = self.value(ins[0]).rows();
                let g = self.grad_slot(grads, ins[0]);
                for t in 0..t_out {
                    let (s, e) = pool_window(t, t_in, t_out);
                    let inv = F::from_f64(1.0 / (e - s) as f64);
                    let orow = &gout.data()[t * c..(t + 1) * c];
                    for r in s..e {
                        let grow = &mut g.data_mut()[r * c..(r + 1) * c];
                        for (gi, &oi) in grow.iter_mut().zip(orow) {
                            *gi += oi * inv;
                        }
                    }
                }
            }
            Op::EmbedSum { indices, frames } => {
                let d = node.value.cols();
                for (q, &tab) in ins.iter().enumerate() {
                    let g = self.grad_slot(grads, tab);
                    for t in 0..*frames {
                        let idx = indices[q * frames + t] as usize;
                        let orow = &gout.data()[t * d..(t + 1) * d];
                        let grow = &mut g.data_mut()[idx * d..(idx + 1) * d];
                        for (gi, &oi) in grow.iter_mut().zip(orow) {
                            *gi += oi;
                        }
                    }
                }
            }
            Op::SumAll => {
                let s = gout.item();
                let g = self.grad_slot(grads, ins[0]);
                for o in g.data_mut() {
                    *o += s;
                }
            }
            Op::MaskedCe {
                targets,
                masked_count,
                probs,
            } => {
                if *masked_count == 0 {
                    return;
                }
                let s = gout.item() / F::from_f64(*masked_count as f64);
                for (q, t, row) in probs {
                    let frames = self.value(ins[*q]).rows();
                    let k = row.len();
                    let target = targets[q * frames + t] as usize;
                    let g = self.grad_slot(grads, ins[*q]);
                    let grow = &mut g.data_mut()[t * k..(t + 1) * k];
                    for (j, gi) in grow.iter_mut().enumerate() {
                        let indicator = if j == target { F::one() } else { F::zero() };
                        *gi += s * (row[j] - indicator);
                    }
                }
            }
            Op::MseVs { target } => {
                let pred = self.value(ins[0]);
                let scale = gout.item() * F::from_f64(2.0 / pred.numel() as f64);
                let g = self.grad_slot(grads, ins[0]);
                for ((gi, &p), &t) in g.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
                    *gi += scale * (p - t);
                }
            }
        }
    }
}

/// Window `[start, end)` of input rows feeding output row `t` under
/// adaptive average pooling.
pub fn pool_window(t: usize, t_in: usize, t_out: usize) -> (usize, usize) {
    let start = t * t_in / t_out;
    let end = ((t + 1) * t_in).div_ceil(t_out);
    (start, end)
}

fn add_into<F: Scalar>(dst: &mut Tensor<F>, src: &Tensor<F>) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

/// dst += a @ b^T  (a: [m,n], b: [p,n] -> dst: [m,p])
fn matmul_bt_into<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, dst: &mut Tensor<F>) {
    let (m, n) = (a.rows(), a.cols());
    let p = b.rows();
    assert_eq!(b.cols(), n);
    for i in 0..m {
        let arow = a.row(i);
        let drow = &mut dst.data_mut()[i * p..(i + 1) * p];
        for (q, d) in drow.iter_mut().enumerate() {
            let brow = b.row(q);
            let mut s = F::zero();
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            *d += s;
        }
    }
}

/// dst += a^T @ b  (a: [m,k], b: [m,n] -> dst: [k,n])
fn matmul_at_into<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, dst: &mut Tensor<F>) {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    assert_eq!(b.rows(), m);
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for p in 0..k {
            let aip = arow[p];
            if aip == F::zero() {
                continue;
            }
            let drow = &mut dst.data_mut()[p * n..(p + 1) * n];
            for (d, &bv) in drow.iter_mut().zip(brow) {
                *d += aip * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences against the analytic gradient of a
    /// scalar loss built from one parameter tensor.
    fn fd_check(shape: Vec<usize>, seed: u64, build: impl Fn(&mut Graph<f64>, NodeId) -> NodeId) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Tensor::randn(shape, 0.7, &mut rng);

        let eval = |t: &Tensor<f64>| -> (f64, Option<HashMap<String, Tensor<f64>>>) {
            let mut g = Graph::new();
            let pid = g.param("p", t);
            let loss = build(&mut g, pid);
            let v = g.value(loss).item();
            (v, Some(g.backward(loss)))
        };

        let (_, grads) = eval(&p);
        let analytic = grads.unwrap().remove("p").expect("parameter reachable");

        let eps = 1e-5;
        for i in 0..p.numel() {
            let mut plus = p.clone();
            plus.data_mut()[i] += eps;
            let mut minus = p.clone();
            minus.data_mut()[i] -= eps;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
            let an = analytic.data()[i];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                ((fd - an) / denom).abs() < 1e-5,
                "element {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    fn randn(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 0.7, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn fd_matmul_both_sides() {
        fd_check(vec![3, 4], 1, |g, p| {
            let b = g.constant(randn(vec![4, 2], 100));
            let y = g.matmul(p, b);
            g.sum_all(y)
        });
        fd_check(vec![4, 2], 2, |g, p| {
            let a = g.constant(randn(vec![3, 4], 101));
            let y = g.matmul(a, p);
            g.sum_all(y)
        });
    }

    #[test]
    fn fd_transpose_add_scale() {
        fd_check(vec![3, 5], 3, |g, p| {
            let t = g.transpose(p);
            let o = g.constant(randn(vec![5, 3], 102));
            let s = g.add(t, o);
            let sc = g.scale(s, -1.7);
            g.sum_all(sc)
        });
    }

    #[test]
    fn fd_row_broadcasts() {
        fd_check(vec![4], 4, |g, p| {
            let x = g.constant(randn(vec![3, 4], 103));
            let y = g.add_row(x, p);
            let z = g.mul_row(y, p);
            let target = randn(vec![3, 4], 104);
            g.mse_vs(z, target)
        });
        fd_check(vec![3, 4], 5, |g, p| {
            let v = g.constant(randn(vec![4], 105));
            let y = g.mul_row(p, v);
            g.sum_all(y)
        });
    }

    #[test]
    fn fd_gelu() {
        fd_check(vec![2, 6], 6, |g, p| {
            let y = g.gelu(p);
            let target = randn(vec![2, 6], 106);
            g.mse_vs(y, target)
        });
    }

    #[test]
    fn fd_layer_norm_all_inputs() {
        fd_check(vec![3, 6], 7, |g, p| {
            let gain = g.constant(randn(vec![6], 107));
            let bias = g.constant(randn(vec![6], 108));
            let y = g.layer_norm(p, gain, bias, 1e-5);
            let target = randn(vec![3, 6], 109);
            g.mse_vs(y, target)
        });
        fd_check(vec![6], 8, |g, p| {
            let x = g.constant(randn(vec![3, 6], 110));
            let bias = g.constant(randn(vec![6], 111));
            let y = g.layer_norm(x, p, bias, 1e-5);
            g.sum_all(y)
        });
        fd_check(vec![6], 9, |g, p| {
            let x = g.constant(randn(vec![3, 6], 112));
            let gain = g.constant(randn(vec![6], 113));
            let y = g.layer_norm(x, gain, p, 1e-5);
            let target = randn(vec![3, 6], 114);
            g.mse_vs(y, target)
        });
    }

    #[test]
    fn fd_softmax() {
        fd_check(vec![3, 5], 10, |g, p| {
            let y = g.softmax_rows(p);
            let target = randn(vec![3, 5], 115);
            g.mse_vs(y, target)
        });
    }

    #[test]
    fn fd_slice_concat() {
        fd_check(vec![3, 6], 11, |g, p| {
            let a = g.slice_cols(p, 0, 2);
            let b = g.slice_cols(p, 2, 6);
            let c = g.slice_cols(p, 1, 3);
            let cat = g.concat_cols(&[a, b, c]);
            let target = randn(vec![3, 8], 119);
            g.mse_vs(cat, target)
        });
    }

    #[test]
    fn fd_avg_pool_downsample_and_upsample() {
        fd_check(vec![5, 3], 12, |g, p| {
            let y = g.avg_pool_rows(p, 3);
            let target = randn(vec![3, 3], 116);
            g.mse_vs(y, target)
        });
        fd_check(vec![3, 2], 13, |g, p| {
            let y = g.avg_pool_rows(p, 7);
            g.sum_all(y)
        });
    }

    #[test]
    fn fd_embed_sum() {
        fd_check(vec![5, 4], 14, |g, p| {
            let other = g.constant(randn(vec![5, 4], 117));
            let indices = vec![0u32, 4, 2, 2, 1, 3, 0, 4];
            let y = g.embed_sum(&[p, other], indices, 4);
            let target = randn(vec![4, 4], 118);
            g.mse_vs(y, target)
        });
    }

    #[test]
    fn fd_masked_cross_entropy() {
        fd_check(vec![4, 3], 15, |g, p| {
            let sc = g.scale(p, 2.0);
            let targets = vec![2u32, 0, 1, 1];
            let mask = vec![true, false, true, true];
            let (loss, empty) = g.masked_cross_entropy(&[sc], &targets, &mask);
            assert!(!empty);
            loss
        });
    }

    #[test]
    fn loss_sum_gives_unit_gradients() {
        let mut g: Graph<f64> = Graph::new();
        let p = Tensor::randn(vec![3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let pid = g.param("p", &p);
        let loss = g.sum_all(pid);
        let grads = g.backward(loss);
        assert!(grads["p"].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_residual_mse_gives_zero_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let p = Tensor::randn(vec![2, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let pid = g.param("p", &p);
        let loss = g.mse_vs(pid, p.clone());
        assert_eq!(g.value(loss).item(), 0.0);
        let grads = g.backward(loss);
        assert!(grads["p"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unreached_parameter_gets_no_entry() {
        let mut g: Graph<f64> = Graph::new();
        let p = Tensor::scalar(1.0);
        let _unused = g.param("unused", &p);
        let pid = g.param("used", &p);
        let loss = g.sum_all(pid);
        let grads = g.backward(loss);
        assert!(grads.contains_key("used"));
        assert!(!grads.contains_key("unused"));
    }

    #[test]
    fn masked_ce_uniform_logits_is_log_k() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![3, 64]));
        let targets = vec![5u32, 10, 63];
        let mask = vec![true, true, true];
        let (loss, _) = g.masked_cross_entropy(&[logits], &targets, &mask);
        assert!((g.value(loss).item() - 64f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_ce_confident_logit_vanishes() {
        let mut g: Graph<f64> = Graph::new();
        let mut t = Tensor::zeros(vec![1, 8]);
        t.data_mut()[3] = 30.0;
        let logits = g.constant(t);
        let (loss, _) = g.masked_cross_entropy(&[logits], &[3], &[true]);
        assert!(g.value(loss).item() < 1e-9);
    }

    #[test]
    fn masked_ce_averages_only_masked_positions() {
        // 1x5x4 case: two masked positions with hand-computed losses.
        let mut g: Graph<f64> = Graph::new();
        let mut t = Tensor::zeros(vec![5, 4]);
        for (row, vals) in [
            [1.0, 0.0, 0.0, 0.0],
            [9.0, 9.0, 9.0, 9.0],
            [0.0, 2.0, 0.5, 0.0],
            [3.0, 3.0, 3.0, 3.0],
            [1.0, 1.0, 1.0, 1.0],
        ]
        .iter()
        .enumerate()
        {
            t.data_mut()[row * 4..(row + 1) * 4].copy_from_slice(vals);
        }
        let logits = g.constant(t.clone());
        let targets = vec![0u32, 0, 1, 0, 0];
        let mask = vec![true, false, true, false, false];
        let (loss, empty) = g.masked_cross_entropy(&[logits], &targets, &mask);
        assert!(!empty);
        let nll = |row: &[f64], target: usize| -> f64 {
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            lse - row[target]
        };
        let expected = (nll(t.row(0), 0) + nll(t.row(2), 1)) / 2.0;
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn masked_ce_empty_mask_is_zero_with_flag() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![2, 3]));
        let (loss, empty) = g.masked_cross_entropy(&[logits], &[0, 0], &[false, false]);
        assert!(empty);
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn mse_known_values() {
        let mut g: Graph<f64> = Graph::new();
        let pred = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let loss = g.mse_vs(pred, Tensor::zeros(vec![1, 2]));
        assert_eq!(g.value(loss).item(), 2.5);

        let x = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 3.0]);
        let mut g: Graph<f64> = Graph::new();
        let pred = g.constant(x.clone());
        let same = g.mse_vs(pred, x.clone());
        assert_eq!(g.value(same).item(), 0.0);

        let shifted = x.map(|v| v + 1.0);
        let mut g: Graph<f64> = Graph::new();
        let pred = g.constant(shifted);
        let one = g.mse_vs(pred, x);
        assert!((g.value(one).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pool_window_matches_examples() {
        // T_in=4 -> T_out=2: [0,2) and [2,4)
        assert_eq!(pool_window(0, 4, 2), (0, 2));
        assert_eq!(pool_window(1, 4, 2), (2, 4));
        // T_in=3 -> T_out=2: [0,2) and [1,3)
        assert_eq!(pool_window(0, 3, 2), (0, 2));
        assert_eq!(pool_window(1, 3, 2), (1, 3));
    }
}
