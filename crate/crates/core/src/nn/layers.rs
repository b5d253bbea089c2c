//! Basic building blocks shared by the extractor, encoder and context module.

use htr_autograd::{Tensor, Var};
use rand::Rng;

use super::ctx::{BnUpdate, Ctx};
use super::params::{Init, ParamBuilder, ParamId, ParamKind};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Gelu,
}

impl Activation {
    pub fn apply(self, ctx: &mut Ctx, x: Var) -> Var {
        match self {
            Activation::Relu => ctx.g.relu(x),
            Activation::Silu => ctx.g.silu(x),
            Activation::Gelu => ctx.g.gelu(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let w = pb.weight(format!("{name}.weight"), &[din, dout], (1.0 / din as f64).sqrt());
        let b = bias.then(|| pb.no_decay(format!("{name}.bias"), &[dout], Init::Zeros));
        Self { w, b }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.p(self.w);
        let b = self.b.map(|b| ctx.p(b));
        ctx.g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        Self {
            gamma: pb.no_decay(format!("{name}.gamma"), &[dim], Init::Const(1.0)),
            beta: pb.no_decay(format!("{name}.beta"), &[dim], Init::Zeros),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.g.layer_norm(x, g, b, LN_EPS)
    }
}

/// Batch norm over axis 1 with running statistics for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        Self {
            gamma: pb.no_decay(format!("{name}.gamma"), &[channels], Init::Const(1.0)),
            beta: pb.no_decay(format!("{name}.beta"), &[channels], Init::Zeros),
            running_mean: pb.add(
                format!("{name}.running_mean"),
                &[channels],
                Init::Zeros,
                ParamKind::Buffer,
            ),
            running_var: pb.add(
                format!("{name}.running_var"),
                &[channels],
                Init::Const(1.0),
                ParamKind::Buffer,
            ),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        if ctx.training() {
            let shape = ctx.g.shape(x);
            let count = shape.iter().product::<usize>() / shape[1].max(1);
            let (y, stats) = ctx.g.batch_norm_train(x, g, b, BN_EPS);
            ctx.record_bn(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
                count,
            });
            y
        } else {
            let mean = ctx.value_of(self.running_mean).data().to_vec();
            let var = ctx.value_of(self.running_var).data().to_vec();
            ctx.g.channel_affine(x, g, b, &mean, &var, BN_EPS)
        }
    }
}

/// Folds observed batch statistics into running estimates (unbiased variance).
pub fn apply_bn_update(mean: &mut Tensor, var: &mut Tensor, u: &BnUpdate) {
    let unbias = if u.count > 1 {
        u.count as f64 / (u.count - 1) as f64
    } else {
        1.0
    };
    for (m, b) in mean.data_mut().iter_mut().zip(&u.stats.mean) {
        *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
    }
    for (v, b) in var.data_mut().iter_mut().zip(&u.stats.var) {
        *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b * unbias;
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        bias: bool,
    ) -> Self {
        let fan_in = (cin * kernel.0 * kernel.1) as f64;
        let w = pb.weight(
            format!("{name}.weight"),
            &[cout, cin, kernel.0, kernel.1],
            (2.0 / fan_in).sqrt(),
        );
        let b = bias.then(|| pb.no_decay(format!("{name}.bias"), &[cout], Init::Zeros));
        Self { w, b, stride, pad }
    }

    /// `k`×`k` convolution with "same" padding for stride 1.
    pub fn square(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Self {
        Self::new(pb, name, cin, cout, (k, k), (1, 1), (k / 2, k / 2), bias)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.p(self.w);
        let y = ctx.g.conv2d(x, w, self.stride, self.pad);
        match self.b {
            Some(b) => {
                let b = ctx.p(b);
                ctx.g.add_channel(y, b)
            }
            None => y,
        }
    }
}

/// Convolution followed by batch norm and an optional activation.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub act: Option<Activation>,
}

impl ConvBn {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let y = self.conv.forward(ctx, x);
        let y = self.bn.forward(ctx, y);
        match self.act {
            Some(a) => a.apply(ctx, y),
            None => y,
        }
    }
}

/// Two-layer position-wise feed-forward network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, hidden: usize, act: Activation) -> Self {
        Self {
            fc1: Linear::new(pb, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(pb, &format!("{name}.fc2"), hidden, dim, true),
            act,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.fc1.forward(ctx, x);
        let h = self.act.apply(ctx, h);
        self.fc2.forward(ctx, h)
    }
}

/// Learnable per-channel residual scale.
pub fn layer_scale(pb: &mut ParamBuilder, name: &str, dim: usize, init: f64) -> ParamId {
    pb.no_decay(format!("{name}.layer_scale"), &[dim], Init::Const(init))
}

/// Stochastic depth: zeroes whole samples of a residual branch with
/// probability `rate` and rescales survivors. Identity outside training.
pub fn drop_path(ctx: &mut Ctx, x: Var, rate: f64) -> Var {
    if !ctx.training() || rate <= 0.0 {
        return x;
    }
    let n = ctx.g.shape(x)[0];
    let keep = 1.0 - rate;
    let factors: Vec<f64> = (0..n)
        .map(|_| if ctx.rng().random_bool(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    ctx.g.scale_rows(x, factors)
}

/// `[B, L, H·dh]` to `[B·H, L, dh]`.
pub fn split_heads(ctx: &mut Ctx, x: Var, heads: usize) -> Var {
    let s = ctx.g.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let x = ctx.g.reshape(x, &[b, l, heads, d / heads]);
    let x = ctx.g.permute(x, &[0, 2, 1, 3]);
    ctx.g.reshape(x, &[b * heads, l, d / heads])
}

/// Inverse of [`split_heads`].
pub fn merge_heads(ctx: &mut Ctx, x: Var, heads: usize) -> Var {
    let s = ctx.g.shape(x).to_vec();
    let (bh, l, dh) = (s[0], s[1], s[2]);
    let b = bh / heads;
    let x = ctx.g.reshape(x, &[b, heads, l, dh]);
    let x = ctx.g.permute(x, &[0, 2, 1, 3]);
    ctx.g.reshape(x, &[b, l, heads * dh])
}

/// Sinusoidal embedding of (possibly negative) positions, `[len, dim]`.
pub fn sinusoid_table(positions: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[positions.len(), dim], |i| {
        let (r, c) = (i / dim, i % dim);
        let k = (c % half.max(1)) as f64;
        let freq = (-(10000f64.ln()) * 2.0 * k / dim as f64).exp();
        let a = positions[r] * freq;
        if c < half {
            a.sin()
        } else {
            a.cos()
        }
    })
}
