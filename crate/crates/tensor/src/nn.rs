//! Layer builders: parameter initialization plus graph-forward helpers.
//!
//! A layer struct only stores parameter names and static hyperparameters;
//! the tensors live in a [`ParamStore`] and enter each forward graph through
//! [`Graph::param`], so one layer definition serves training, inference and
//! weight surgery alike.

use crate::graph::{Graph, NodeId, Unary};
use crate::params::ParamStore;
use crate::rng::{standard_normal_vec, SeededRng};
use crate::tensor::Tensor;

pub fn normal_init(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = standard_normal_vec(rng, n).into_iter().map(|x| x * std).collect();
    Tensor::new(shape, data)
}

/// Kaiming-style init scaled by fan-in.
pub fn he_init(rng: &mut SeededRng, shape: &[usize], fan_in: usize) -> Tensor {
    normal_init(rng, shape, (2.0 / fan_in as f64).sqrt())
}

/// Sinusoidal features for a scalar position (diffusion timesteps).
pub fn sinusoidal_embedding(pos: f64, dim: usize) -> Tensor {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        data[i] = (pos * freq).sin();
        data[half + i] = (pos * freq).cos();
    }
    Tensor::new(&[1, dim], data)
}

/// Fully connected layer; weight layout `[in, out]` so `x @ w` applies it.
#[derive(Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        prefix: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let layer = Self::named(prefix, in_features, out_features);
        store.insert(&layer.w, he_init(rng, &[in_features, out_features], in_features));
        store.insert(&layer.b, Tensor::zeros(&[out_features]));
        layer
    }

    /// Zero-initialized variant (output is exactly zero until trained).
    pub fn init_zero(
        store: &mut ParamStore,
        prefix: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let layer = Self::named(prefix, in_features, out_features);
        store.insert(&layer.w, Tensor::zeros(&[in_features, out_features]));
        store.insert(&layer.b, Tensor::zeros(&[out_features]));
        layer
    }

    pub fn named(prefix: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, &self.w);
        let b = g.param(store, &self.b);
        let y = g.matmul(x, w, false, false);
        g.add_row_bias(y, b)
    }
}

/// 3x3-style convolution layer over `[C,H,W]` tensors.
#[derive(Clone)]
pub struct Conv2dLayer {
    pub w: String,
    pub b: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let layer = Self {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            stride,
            pad,
        };
        store.insert(&layer.w, he_init(rng, &[cout, cin, k, k], cin * k * k));
        store.insert(&layer.b, Tensor::zeros(&[cout]));
        layer
    }

    /// Zero convolution: weights and bias all zero at init.
    pub fn init_zero(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        let layer = Self {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            stride: 1,
            pad: k / 2,
        };
        store.insert(&layer.w, Tensor::zeros(&[cout, cin, k, k]));
        store.insert(&layer.b, Tensor::zeros(&[cout]));
        layer
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, &self.w);
        let b = g.param(store, &self.b);
        let y = g.conv2d(x, w, self.stride, self.pad);
        g.add_channel_bias(y, b)
    }
}

/// Layer normalization over the last dim of `[N,F]`.
#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, prefix: &str, features: usize) -> Self {
        let ln = Self {
            gamma: format!("{prefix}.g"),
            beta: format!("{prefix}.b"),
            eps: 1e-5,
        };
        store.insert(&ln.gamma, Tensor::full(&[features], 1.0));
        store.insert(&ln.beta, Tensor::zeros(&[features]));
        ln
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let f = g.value(x).shape()[1];
        let mean = g.mean_last(x, 1);
        let mean_b = g.broadcast_last(mean, &[f]);
        let centered = g.sub(x, mean_b);
        let sq = g.square(centered);
        let var = g.mean_last(sq, 1);
        let var_eps = g.add_scalar(var, self.eps);
        let std = g.unary(var_eps, Unary::Sqrt);
        let inv = g.unary(std, Unary::Recip);
        let inv_b = g.broadcast_last(inv, &[f]);
        let normed = g.mul(centered, inv_b);
        let gamma = g.param(store, &self.gamma);
        let beta = g.param(store, &self.beta);
        let scaled = g.mul_row(normed, gamma);
        g.add_row_bias(scaled, beta)
    }
}

/// Group normalization over `[C,H,W]`.
#[derive(Clone)]
pub struct GroupNorm {
    pub gamma: String,
    pub beta: String,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn init(store: &mut ParamStore, prefix: &str, channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "channels must divide into groups");
        let gn = Self {
            gamma: format!("{prefix}.g"),
            beta: format!("{prefix}.b"),
            groups,
            eps: 1e-5,
        };
        store.insert(&gn.gamma, Tensor::full(&[channels], 1.0));
        store.insert(&gn.beta, Tensor::zeros(&[channels]));
        gn
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let s = g.value(x).shape().to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let per_group = c / self.groups * h * w;
        let grouped = g.reshape(x, &[self.groups, per_group]);
        let mean = g.mean_last(grouped, 1);
        let mean_b = g.broadcast_last(mean, &[per_group]);
        let centered = g.sub(grouped, mean_b);
        let sq = g.square(centered);
        let var = g.mean_last(sq, 1);
        let var_eps = g.add_scalar(var, self.eps);
        let std = g.unary(var_eps, Unary::Sqrt);
        let inv = g.unary(std, Unary::Recip);
        let inv_b = g.broadcast_last(inv, &[per_group]);
        let normed = g.mul(centered, inv_b);
        let back = g.reshape(normed, &[c, h, w]);
        let gamma = g.param(store, &self.gamma);
        let beta = g.param(store, &self.beta);
        let scaled = g.mul_channel(back, gamma);
        g.add_channel_bias(scaled, beta)
    }
}

/// Multi-head attention over row-major token matrices.
///
/// Self-attention when `ctx` is `None`; cross-attention reads keys/values
/// from the context matrix otherwise.
#[derive(Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        prefix: &str,
        dim: usize,
        ctx_dim: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(dim % heads, 0, "dim must divide into heads");
        Self {
            q: Linear::init(store, rng, &format!("{prefix}.q"), dim, dim),
            k: Linear::init(store, rng, &format!("{prefix}.k"), ctx_dim, dim),
            v: Linear::init(store, rng, &format!("{prefix}.v"), ctx_dim, dim),
            o: Linear::init(store, rng, &format!("{prefix}.o"), dim, dim),
            heads,
            head_dim: dim / heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        ctx: Option<NodeId>,
    ) -> NodeId {
        let kv_src = ctx.unwrap_or(x);
        let q = self.q.forward(g, store, x);
        let k = self.k.forward(g, store, kv_src);
        let v = self.v.forward(g, store, kv_src);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let qh = g.slice_cols(q, hd * self.head_dim, self.head_dim);
            let kh = g.slice_cols(k, hd * self.head_dim, self.head_dim);
            let vh = g.slice_cols(v, hd * self.head_dim, self.head_dim);
            let scores = g.matmul(qh, kh, false, true);
            let scaled = g.scale(scores, scale);
            let attn = g.softmax_last(scaled);
            outs.push(g.matmul(attn, vh, false, false));
        }
        let merged = g.concat_cols(&outs);
        self.o.forward(g, store, merged)
    }
}
