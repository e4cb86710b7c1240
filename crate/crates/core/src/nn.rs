//! Layers shared by the feature extractor and the acoustic model. Each layer
//! only stores [`ParamId`]s; values live in a [`ParamStore`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Graph, Var};
use crate::mat::Mat;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

pub(crate) fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Mat<T> {
    Mat::from_fn(rows, cols, |_, _| T::of(rng.gen_range(-bound..=bound)))
}

pub(crate) fn normal<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat<T> {
    Mat::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

/// Train or eval behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-pass state: mode plus the dropout stream. Rebuilding a context from
/// the same seed reproduces the same dropout masks.
pub struct Ctx {
    pub mode: Mode,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Inverted dropout; identity in eval mode or with zero rate.
    pub fn dropout<T: Scalar>(&mut self, g: &mut Graph<'_, T>, x: Var) -> Var {
        if !self.is_train() || self.dropout <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.dropout;
        let (r, c) = g.value(x).shape();
        let scale = T::of(1.0 / keep);
        let mask = Mat::from_fn(
            r,
            c,
            |_, _| {
                if self.rng.gen::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            },
        );
        let m = g.constant(mask);
        g.mul(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weight `fan_in × fan_out` uniform in `±1/sqrt(fan_in)`, zero bias.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: store.insert(format!("{name}.weight"), uniform(rng, fan_in, fan_out, bound)),
            bias: store.insert(format!("{name}.bias"), Mat::zeros(1, fan_out)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// 1-D "same" convolution over the time (row) axis.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: usize,
    pub linear: Linear,
}

impl Conv1d {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            kernel,
            linear: Linear::init(store, name, kernel * in_dim, out_dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let u = if self.kernel == 1 { x } else { g.unfold(x, self.kernel) };
        self.linear.forward(g, u)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Mat::filled(1, dim, T::one())),
            beta: store.insert(format!("{name}.beta"), Mat::zeros(1, dim)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let n = g.layer_norm(x, T::of(LAYER_NORM_EPS));
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            heads,
            query: Linear::init(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::init(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::init(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::init(store, &format!("{name}.output"), dim, dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, ctx: &mut Ctx) -> Var {
        let dim = g.value(x).cols();
        let head_dim = dim / self.heads;
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let temperature = T::of(1.0 / (head_dim as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            let scores = g.matmul_t(qh, false, kh, true);
            let scores = g.scale(scores, temperature);
            let attn = g.softmax(scores);
            let attn = ctx.dropout(g, attn);
            outs.push(g.matmul(attn, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.output.forward(g, cat)
    }
}

/// Feed-forward Transformer block: self-attention and a convolutional
/// position-wise network, each wrapped in dropout, residual and layer norm.
#[derive(Clone, Debug)]
pub struct FftBlock {
    pub attention: MultiHeadAttention,
    pub attention_norm: LayerNorm,
    pub conv_in: Conv1d,
    pub conv_out: Conv1d,
    pub ff_norm: LayerNorm,
}

impl FftBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        ff_kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            attention: MultiHeadAttention::init(store, &format!("{name}.attention"), dim, heads, rng),
            attention_norm: LayerNorm::init(store, &format!("{name}.attention_norm"), dim),
            conv_in: Conv1d::init(store, &format!("{name}.ff_in"), dim, ff_hidden, ff_kernel, rng),
            conv_out: Conv1d::init(store, &format!("{name}.ff_out"), ff_hidden, dim, 1, rng),
            ff_norm: LayerNorm::init(store, &format!("{name}.ff_norm"), dim),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, ctx: &mut Ctx) -> Var {
        let a = self.attention.forward(g, x, ctx);
        let a = ctx.dropout(g, a);
        let x = g.add(x, a);
        let x = self.attention_norm.forward(g, x);
        let f = self.conv_in.forward(g, x);
        let f = g.relu(f);
        let f = self.conv_out.forward(g, f);
        let f = ctx.dropout(g, f);
        let x = g.add(x, f);
        self.ff_norm.forward(g, x)
    }
}

/// Two conv/ReLU/norm/dropout stages and a scalar projection per position.
#[derive(Clone, Debug)]
pub struct VariancePredictor {
    pub conv1: Conv1d,
    pub norm1: LayerNorm,
    pub conv2: Conv1d,
    pub norm2: LayerNorm,
    pub out: Linear,
}

impl VariancePredictor {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv1: Conv1d::init(store, &format!("{name}.conv1"), dim, hidden, kernel, rng),
            norm1: LayerNorm::init(store, &format!("{name}.norm1"), hidden),
            conv2: Conv1d::init(store, &format!("{name}.conv2"), hidden, hidden, kernel, rng),
            norm2: LayerNorm::init(store, &format!("{name}.norm2"), hidden),
            out: Linear::init(store, &format!("{name}.out"), hidden, 1, rng),
        }
    }

    /// `n × dim` in, `n × 1` out.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, ctx: &mut Ctx) -> Var {
        let h = self.conv1.forward(g, x);
        let h = g.relu(h);
        let h = self.norm1.forward(g, h);
        let h = ctx.dropout(g, h);
        let h = self.conv2.forward(g, h);
        let h = g.relu(h);
        let h = self.norm2.forward(g, h);
        let h = ctx.dropout(g, h);
        self.out.forward(g, h)
    }
}

/// Sinusoidal position table, `len × dim`.
pub fn positional_encoding<T: Scalar>(len: usize, dim: usize) -> Mat<T> {
    Mat::from_fn(len, dim, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
