//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is a tape of nodes created by builder methods. Models build a
//! fresh graph per forward pass; parameter leaves are cached by name so a
//! batch loop naturally shares them and their gradients accumulate. Shape
//! errors are programmer errors and panic; validation of user input happens
//! at the module boundaries above this crate.
//!
//! Everything is sequential f64, so a given graph evaluates to bitwise
//! identical results on every run.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Copy, Clone, Debug)]
pub enum Unary {
    Silu,
    Sigmoid,
    Square,
    Sqrt,
    Tanh,
    Recip,
    Exp,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Unary(NodeId, Unary),
    Detach,
    Reshape(NodeId),
    Transpose2(NodeId),
    Matmul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    UpsampleNearest(NodeId, usize),
    ConcatChannels(NodeId, NodeId),
    AddChannelBias(NodeId, NodeId),
    MulChannel(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MeanLast(NodeId, usize),
    BroadcastLast(NodeId, Vec<usize>),
    MeanAll(NodeId),
    SumAll(NodeId),
    SoftmaxLast(NodeId),
    LogSoftmaxLast(NodeId),
    GatherRows(NodeId, Vec<usize>),
    PickPerRow(NodeId, Vec<usize>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Anonymous trainable leaf (used for embedding optimization and tests).
    pub fn var(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Named parameter leaf; repeated calls with one name share the node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let t = store.get(name).clone();
        let id = self.push(t, Op::Leaf, true);
        self.params.insert(name.to_string(), id);
        id
    }

    /// Like [`Graph::param`] but frozen: gradients do not flow into it.
    pub fn frozen_param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let t = store.get(name).clone();
        let id = self.push(t, Op::Leaf, false);
        self.params.insert(name.to_string(), id);
        id
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(va.shape(), data);
        let g = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(va.shape(), data);
        let g = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(va.shape(), data);
        let g = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.value(a).map(|x| x * c);
        let g = self.ng(a);
        self.push(t, Op::Scale(a, c), g)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.value(a).map(|x| x + c);
        let g = self.ng(a);
        self.push(t, Op::AddScalar(a), g)
    }

    pub fn unary(&mut self, a: NodeId, kind: Unary) -> NodeId {
        let t = self.value(a).map(|x| apply_unary(kind, x));
        let g = self.ng(a);
        self.push(t, Op::Unary(a, kind), g)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Silu)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Square)
    }

    /// Identity with a severed gradient path.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).clone();
        self.push(t, Op::Detach, false)
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let t = self.value(a).reshaped(shape);
        let g = self.ng(a);
        self.push(t, Op::Reshape(a), g)
    }

    pub fn transpose2(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.shape().len(), 2, "transpose2 wants a matrix");
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = v.data()[i * n + j];
            }
        }
        let t = Tensor::new(&[n, m], data);
        let g = self.ng(a);
        self.push(t, Op::Transpose2(a), g)
    }

    // ---- linear algebra ----

    /// Matrix product with optional logical transposes of either operand.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape().len(), 2, "matmul lhs must be 2-d");
        assert_eq!(vb.shape().len(), 2, "matmul rhs must be 2-d");
        let (m, ka) = logical_dims(va.shape(), ta);
        let (kb, n) = logical_dims(vb.shape(), tb);
        assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
        let mut out = vec![0.0; m * n];
        gemm(
            m, ka, n, 1.0, va.data(), ta, vb.data(), tb, 0.0, &mut out,
        );
        let t = Tensor::new(&[m, n], out);
        let g = self.ng(a) || self.ng(b);
        self.push(t, Op::Matmul { a, b, ta, tb }, g)
    }

    // ---- conv and spatial ----

    /// 2-d convolution: x `[Cin,H,W]` * w `[Cout,Cin,kh,kw]` -> `[Cout,Ho,Wo]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let (vx, vw) = (self.value(x), self.value(w));
        let y = conv2d_forward(vx, vw, stride, pad);
        let g = self.ng(x) || self.ng(w);
        self.push(y, Op::Conv2d { x, w, stride, pad }, g)
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> NodeId {
        let v = self.value(x);
        let s = v.shape();
        assert_eq!(s.len(), 3, "upsample wants [C,H,W]");
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    data[(ci * oh + i) * ow + j] = v.data()[(ci * h + i / factor) * w + j / factor];
                }
            }
        }
        let t = Tensor::new(&[c, oh, ow], data);
        let g = self.ng(x);
        self.push(t, Op::UpsampleNearest(x, factor), g)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(&sa[1..], &sb[1..], "concat_channels spatial mismatch");
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let t = Tensor::new(&[sa[0] + sb[0], sa[1], sa[2]], data);
        let g = self.ng(a) || self.ng(b);
        self.push(t, Op::ConcatChannels(a, b), g)
    }

    /// `[C,H,W] + [C]`, bias broadcast over the spatial dims.
    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (vx, vb) = (self.value(x), self.value(b));
        let s = vx.shape();
        assert_eq!(s.len(), 3);
        assert_eq!(vb.shape(), &[s[0]], "channel bias mismatch");
        let hw = s[1] * s[2];
        let mut data = vx.data().to_vec();
        for c in 0..s[0] {
            let bias = vb.data()[c];
            for v in &mut data[c * hw..(c + 1) * hw] {
                *v += bias;
            }
        }
        let t = Tensor::new(s, data);
        let g = self.ng(x) || self.ng(b);
        self.push(t, Op::AddChannelBias(x, b), g)
    }

    /// `[C,H,W] * [C]`, per-channel scaling.
    pub fn mul_channel(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (vx, vs) = (self.value(x), self.value(s));
        let sh = vx.shape();
        assert_eq!(sh.len(), 3);
        assert_eq!(vs.shape(), &[sh[0]], "channel scale mismatch");
        let hw = sh[1] * sh[2];
        let mut data = vx.data().to_vec();
        for c in 0..sh[0] {
            let k = vs.data()[c];
            for v in &mut data[c * hw..(c + 1) * hw] {
                *v *= k;
            }
        }
        let t = Tensor::new(sh, data);
        let g = self.ng(x) || self.ng(s);
        self.push(t, Op::MulChannel(x, s), g)
    }

    /// `[N,F] + [F]` row-broadcast bias.
    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (vx, vb) = (self.value(x), self.value(b));
        let s = vx.shape();
        assert_eq!(s.len(), 2);
        assert_eq!(vb.shape(), &[s[1]], "row bias mismatch");
        let mut data = vx.data().to_vec();
        for r in 0..s[0] {
            for c in 0..s[1] {
                data[r * s[1] + c] += vb.data()[c];
            }
        }
        let t = Tensor::new(s, data);
        let g = self.ng(x) || self.ng(b);
        self.push(t, Op::AddRowBias(x, b), g)
    }

    /// `[N,F] * [F]` row-broadcast scale.
    pub fn mul_row(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (vx, vs) = (self.value(x), self.value(s));
        let sh = vx.shape();
        assert_eq!(sh.len(), 2);
        assert_eq!(vs.shape(), &[sh[1]], "row scale mismatch");
        let mut data = vx.data().to_vec();
        for r in 0..sh[0] {
            for c in 0..sh[1] {
                data[r * sh[1] + c] *= vs.data()[c];
            }
        }
        let t = Tensor::new(sh, data);
        let g = self.ng(x) || self.ng(s);
        self.push(t, Op::MulRow(x, s), g)
    }

    // ---- reductions and broadcasts ----

    /// Mean over the last `k` dims.
    pub fn mean_last(&mut self, x: NodeId, k: usize) -> NodeId {
        let v = self.value(x);
        let s = v.shape();
        assert!(k >= 1 && k < s.len(), "mean_last k={k} of {s:?}");
        let outer: usize = s[..s.len() - k].iter().product();
        let inner: usize = s[s.len() - k..].iter().product();
        let mut data = vec![0.0; outer];
        for o in 0..outer {
            let mut acc = 0.0;
            for i in 0..inner {
                acc += v.data()[o * inner + i];
            }
            data[o] = acc / inner as f64;
        }
        let t = Tensor::new(&s[..s.len() - k], data);
        let g = self.ng(x);
        self.push(t, Op::MeanLast(x, k), g)
    }

    /// Append dims and repeat each element across them.
    pub fn broadcast_last(&mut self, x: NodeId, dims: &[usize]) -> NodeId {
        let v = self.value(x);
        let inner: usize = dims.iter().product();
        let mut data = Vec::with_capacity(v.numel() * inner);
        for &val in v.data() {
            for _ in 0..inner {
                data.push(val);
            }
        }
        let mut shape = v.shape().to_vec();
        shape.extend_from_slice(dims);
        let t = Tensor::new(&shape, data);
        let g = self.ng(x);
        self.push(t, Op::BroadcastLast(x, dims.to_vec()), g)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let t = Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64);
        let g = self.ng(x);
        self.push(t, Op::MeanAll(x), g)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let t = Tensor::scalar(v.data().iter().sum::<f64>());
        let g = self.ng(x);
        self.push(t, Op::SumAll(x), g)
    }

    // ---- rows, softmax, lookup ----

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let t = rowwise(v, softmax_row);
        let g = self.ng(x);
        self.push(t, Op::SoftmaxLast(x), g)
    }

    pub fn log_softmax_last(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let t = rowwise(v, log_softmax_row);
        let g = self.ng(x);
        self.push(t, Op::LogSoftmaxLast(x), g)
    }

    /// Row lookup: table `[K,D]`, idx `[N]` -> `[N,D]`.
    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let v = self.value(table);
        let s = v.shape();
        assert_eq!(s.len(), 2);
        let d = s[1];
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < s[0], "gather index {i} out of {}", s[0]);
            data.extend_from_slice(&v.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[idx.len(), d], data);
        let g = self.ng(table);
        self.push(t, Op::GatherRows(table, idx.to_vec()), g)
    }

    /// Per-row element pick: x `[N,K]`, idx `[N]` -> `[N]`.
    pub fn pick_per_row(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let v = self.value(x);
        let s = v.shape();
        assert_eq!(s.len(), 2);
        assert_eq!(idx.len(), s[0]);
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| {
                assert!(i < s[1]);
                v.data()[r * s[1] + i]
            })
            .collect();
        let t = Tensor::new(&[s[0]], data);
        let g = self.ng(x);
        self.push(t, Op::PickPerRow(x, idx.to_vec()), g)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x);
        let s = v.shape();
        assert_eq!(s.len(), 2);
        assert!(start + len <= s[1], "slice_cols out of range");
        let mut data = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            data.extend_from_slice(&v.data()[r * s[1] + start..r * s[1] + start + len]);
        }
        let t = Tensor::new(&[s[0], len], data);
        let g = self.ng(x);
        self.push(t, Op::SliceCols { x, start, len }, g)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).shape()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.value(p).shape();
                assert_eq!(s.len(), 2);
                assert_eq!(s[0], n, "concat_cols row mismatch");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (pi, &p) in parts.iter().enumerate() {
                let w = widths[pi];
                let v = self.value(p);
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(&[n, total], data);
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(t, Op::ConcatCols(parts.to_vec()), g)
    }

    // ---- composites ----

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.value(root).numel(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { by_node: grads }
    }

    /// Gradients of registered parameters, keyed by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.params {
            if !self.nodes[id.0].needs_grad {
                continue;
            }
            if let Some(g) = grads.get(id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let da = zip_mul(g, vb);
                    self.accum(grads, *a, da);
                }
                if self.ng(*b) {
                    let db = zip_mul(g, va);
                    self.accum(grads, *b, db);
                }
            }
            Op::Scale(a, c) => self.accum(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(&gv, (&xv, &yv))| gv * unary_grad(*kind, xv, yv))
                    .collect();
                self.accum(grads, *a, Tensor::new(x.shape(), data));
            }
            Op::Detach => {}
            Op::Reshape(a) => {
                let da = g.reshaped(self.value(*a).shape());
                self.accum(grads, *a, da);
            }
            Op::Transpose2(a) => {
                let s = node.value.shape();
                let (m, n) = (s[0], s[1]);
                let mut data = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        data[c * m + r] = g.data()[r * n + c];
                    }
                }
                self.accum(grads, *a, Tensor::new(self.value(*a).shape(), data));
            }
            Op::Matmul { a, b, ta, tb } => {
                self.backprop_matmul(*a, *b, *ta, *tb, g, grads);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (dx, dw) = conv2d_backward(vx, vw, *stride, *pad, g, self.ng(*x), self.ng(*w));
                if let Some(dx) = dx {
                    self.accum(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, dw);
                }
            }
            Op::UpsampleNearest(x, f) => {
                let s = self.value(*x).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h * f, w * f);
                let mut data = vec![0.0; c * h * w];
                for ci in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            data[(ci * h + i / f) * w + j / f] += g.data()[(ci * oh + i) * ow + j];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(s, data));
            }
            Op::ConcatChannels(a, b) => {
                let na = self.value(*a).numel();
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                self.accum(grads, *a, Tensor::new(&sa, g.data()[..na].to_vec()));
                self.accum(grads, *b, Tensor::new(&sb, g.data()[na..].to_vec()));
            }
            Op::AddChannelBias(x, b) => {
                self.accum(grads, *x, g.clone());
                if self.ng(*b) {
                    let s = self.value(*x).shape();
                    let hw = s[1] * s[2];
                    let mut db = vec![0.0; s[0]];
                    for c in 0..s[0] {
                        db[c] = g.data()[c * hw..(c + 1) * hw].iter().sum();
                    }
                    self.accum(grads, *b, Tensor::new(&[s[0]], db));
                }
            }
            Op::MulChannel(x, sc) => {
                let s = self.value(*x).shape().to_vec();
                let hw = s[1] * s[2];
                if self.ng(*x) {
                    let vs = self.value(*sc);
                    let mut dx = g.data().to_vec();
                    for c in 0..s[0] {
                        let k = vs.data()[c];
                        for v in &mut dx[c * hw..(c + 1) * hw] {
                            *v *= k;
                        }
                    }
                    self.accum(grads, *x, Tensor::new(&s, dx));
                }
                if self.ng(*sc) {
                    let vx = self.value(*x);
                    let mut ds = vec![0.0; s[0]];
                    for c in 0..s[0] {
                        ds[c] = g.data()[c * hw..(c + 1) * hw]
                            .iter()
                            .zip(&vx.data()[c * hw..(c + 1) * hw])
                            .map(|(a, b)| a * b)
                            .sum();
                    }
                    self.accum(grads, *sc, Tensor::new(&[s[0]], ds));
                }
            }
            Op::AddRowBias(x, b) => {
                self.accum(grads, *x, g.clone());
                if self.ng(*b) {
                    let s = self.value(*x).shape();
                    let mut db = vec![0.0; s[1]];
                    for r in 0..s[0] {
                        for c in 0..s[1] {
                            db[c] += g.data()[r * s[1] + c];
                        }
                    }
                    self.accum(grads, *b, Tensor::new(&[s[1]], db));
                }
            }
            Op::MulRow(x, sc) => {
                let s = self.value(*x).shape().to_vec();
                if self.ng(*x) {
                    let vs = self.value(*sc);
                    let mut dx = g.data().to_vec();
                    for r in 0..s[0] {
                        for c in 0..s[1] {
                            dx[r * s[1] + c] *= vs.data()[c];
                        }
                    }
                    self.accum(grads, *x, Tensor::new(&s, dx));
                }
                if self.ng(*sc) {
                    let vx = self.value(*x);
                    let mut ds = vec![0.0; s[1]];
                    for r in 0..s[0] {
                        for c in 0..s[1] {
                            ds[c] += g.data()[r * s[1] + c] * vx.data()[r * s[1] + c];
                        }
                    }
                    self.accum(grads, *sc, Tensor::new(&[s[1]], ds));
                }
            }
            Op::MeanLast(x, k) => {
                let s = self.value(*x).shape();
                let inner: usize = s[s.len() - k..].iter().product();
                let scale = 1.0 / inner as f64;
                let mut data = Vec::with_capacity(self.value(*x).numel());
                for &gv in g.data() {
                    for _ in 0..inner {
                        data.push(gv * scale);
                    }
                }
                self.accum(grads, *x, Tensor::new(s, data));
            }
            Op::BroadcastLast(x, dims) => {
                let inner: usize = dims.iter().product();
                let outer = self.value(*x).numel();
                let mut data = vec![0.0; outer];
                for (o, item) in data.iter_mut().enumerate() {
                    *item = g.data()[o * inner..(o + 1) * inner].iter().sum();
                }
                self.accum(grads, *x, Tensor::new(self.value(*x).shape(), data));
            }
            Op::MeanAll(x) => {
                let v = self.value(*x);
                let gv = g.item() / v.numel() as f64;
                self.accum(grads, *x, Tensor::full(v.shape(), gv));
            }
            Op::SumAll(x) => {
                let v = self.value(*x);
                self.accum(grads, *x, Tensor::full(v.shape(), g.item()));
            }
            Op::SoftmaxLast(x) => {
                let y = &node.value;
                let s = y.shape();
                let k = s[s.len() - 1];
                let rows = y.numel() / k;
                let mut data = vec![0.0; y.numel()];
                for r in 0..rows {
                    let yr = &y.data()[r * k..(r + 1) * k];
                    let gr = &g.data()[r * k..(r + 1) * k];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..k {
                        data[r * k + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accum(grads, *x, Tensor::new(self.value(*x).shape(), data));
            }
            Op::LogSoftmaxLast(x) => {
                let y = &node.value;
                let s = y.shape();
                let k = s[s.len() - 1];
                let rows = y.numel() / k;
                let mut data = vec![0.0; y.numel()];
                for r in 0..rows {
                    let yr = &y.data()[r * k..(r + 1) * k];
                    let gr = &g.data()[r * k..(r + 1) * k];
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..k {
                        data[r * k + c] = gr[c] - yr[c].exp() * gsum;
                    }
                }
                self.accum(grads, *x, Tensor::new(self.value(*x).shape(), data));
            }
            Op::GatherRows(table, idx) => {
                let vt = self.value(*table);
                let d = vt.shape()[1];
                let mut dt = vec![0.0; vt.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        dt[i * d + c] += g.data()[r * d + c];
                    }
                }
                self.accum(grads, *table, Tensor::new(vt.shape(), dt));
            }
            Op::PickPerRow(x, idx) => {
                let vx = self.value(*x);
                let k = vx.shape()[1];
                let mut dx = vec![0.0; vx.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    dx[r * k + i] += g.data()[r];
                }
                self.accum(grads, *x, Tensor::new(vx.shape(), dx));
            }
            Op::SliceCols { x, start, len } => {
                let vx = self.value(*x);
                let f = vx.shape()[1];
                let mut dx = vec![0.0; vx.numel()];
                for r in 0..vx.shape()[0] {
                    for c in 0..*len {
                        dx[r * f + start + c] = g.data()[r * len + c];
                    }
                }
                self.accum(grads, *x, Tensor::new(vx.shape(), dx));
            }
            Op::ConcatCols(parts) => {
                let n = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.ng(p) {
                        let mut dp = vec![0.0; n * w];
                        for r in 0..n {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accum(grads, p, Tensor::new(&[n, w], dp));
                    }
                    offset += w;
                }
            }
        }
    }

    fn backprop_matmul(
        &self,
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = logical_dims(va.shape(), ta);
        let (_, n) = logical_dims(vb.shape(), tb);
        if self.ng(a) {
            // dA_logical [m,k] = g [m,n] * B_logical^T [n,k]
            let mut da = vec![0.0; m * k];
            gemm(m, n, k, 1.0, g.data(), false, vb.data(), !tb, 0.0, &mut da);
            let da = if ta {
                transpose_raw(&da, m, k)
            } else {
                da
            };
            self.accum(grads, a, Tensor::new(va.shape(), da));
        }
        if self.ng(b) {
            // dB_logical [k,n] = A_logical^T [k,m] * g [m,n]
            let mut db = vec![0.0; k * n];
            gemm(k, m, n, 1.0, va.data(), !ta, g.data(), false, 0.0, &mut db);
            let db = if tb {
                transpose_raw(&db, k, n)
            } else {
                db
            };
            self.accum(grads, b, Tensor::new(vb.shape(), db));
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                assert_eq!(g.shape(), delta.shape(), "gradient shape drift");
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

fn apply_unary(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Silu => x * sigmoid(x),
        Unary::Sigmoid => sigmoid(x),
        Unary::Square => x * x,
        Unary::Sqrt => x.sqrt(),
        Unary::Tanh => x.tanh(),
        Unary::Recip => 1.0 / x,
        Unary::Exp => x.exp(),
    }
}

fn unary_grad(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Square => 2.0 * x,
        Unary::Sqrt => 0.5 / y,
        Unary::Tanh => 1.0 - y * y,
        Unary::Recip => -y * y,
        Unary::Exp => y,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn zip_mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape(), data)
}

fn logical_dims(shape: &[usize], transposed: bool) -> (usize, usize) {
    if transposed {
        (shape[1], shape[0])
    } else {
        (shape[0], shape[1])
    }
}

fn transpose_raw(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}

/// Row-major GEMM via matrixmultiply; `ta`/`tb` flag logically transposed
/// operands whose buffers keep their original layout.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn rowwise(v: &Tensor, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
    let s = v.shape();
    let k = s[s.len() - 1];
    let rows = v.numel() / k;
    let mut data = vec![0.0; v.numel()];
    for r in 0..rows {
        f(&v.data()[r * k..(r + 1) * k], &mut data[r * k..(r + 1) * k]);
    }
    Tensor::new(s, data)
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = x.iter().map(|&v| (v - m).exp()).sum();
    let lz = m + z.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lz;
    }
}

/// Direct im2col + GEMM convolution forward.
fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = unpack3(x.shape());
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [Cout,Cin,kh,kw]");
    assert_eq!(ws[1], cin, "conv channel mismatch");
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let col = im2col(x, kh, kw, stride, pad, ho, wo);
    let ckk = cin * kh * kw;
    let mut out = vec![0.0; cout * ho * wo];
    gemm(cout, ckk, ho * wo, 1.0, w.data(), false, &col, false, 0.0, &mut out);
    Tensor::new(&[cout, ho, wo], out)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    g: &Tensor,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (cin, h, wd) = unpack3(x.shape());
    let ws = w.shape();
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let gs = g.shape();
    let (ho, wo) = (gs[1], gs[2]);
    let ckk = cin * kh * kw;
    // im2col is recomputed here instead of being cached in the node; the
    // extra pass is cheaper than holding every col buffer alive.
    let col = im2col(x, kh, kw, stride, pad, ho, wo);
    let dw = if want_dw {
        let mut dw = vec![0.0; cout * ckk];
        gemm(cout, ho * wo, ckk, 1.0, g.data(), false, &col, true, 0.0, &mut dw);
        Some(Tensor::new(ws, dw))
    } else {
        None
    };
    let dx = if want_dx {
        let mut dcol = vec![0.0; ckk * ho * wo];
        gemm(ckk, cout, ho * wo, 1.0, w.data(), true, g.data(), false, 0.0, &mut dcol);
        let mut dx = vec![0.0; cin * h * wd];
        for ci in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for oi in 0..ho {
                        let hi = (oi * stride + ki) as isize - pad as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        for oj in 0..wo {
                            let wi = (oj * stride + kj) as isize - pad as isize;
                            if wi < 0 || wi >= wd as isize {
                                continue;
                            }
                            dx[(ci * h + hi as usize) * wd + wi as usize] +=
                                dcol[row * ho * wo + oi * wo + oj];
                        }
                    }
                }
            }
        }
        Some(Tensor::new(&[cin, h, wd], dx))
    } else {
        None
    };
    (dx, dw)
}

fn im2col(x: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let (cin, h, wd) = unpack3(x.shape());
    let mut col = vec![0.0; cin * kh * kw * ho * wo];
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let hi = (oi * stride + ki) as isize - pad as isize;
                    if hi < 0 || hi >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let wi = (oj * stride + kj) as isize - pad as isize;
                        if wi < 0 || wi >= wd as isize {
                            continue;
                        }
                        col[row * ho * wo + oi * wo + oj] =
                            x.data()[(ci * h + hi as usize) * wd + wi as usize];
                    }
                }
            }
        }
    }
    col
}

fn unpack3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected [C,H,W], got {shape:?}");
    (shape[0], shape[1], shape[2])
}
