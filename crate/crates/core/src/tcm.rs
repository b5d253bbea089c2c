//! Training-only textual context module: predicts each character from its
//! left and right label windows fused with the visual tokens.

use htr_autograd::{Var, GATHER_ZERO};

use crate::error::{HtrError, Result};
use crate::nn::attention::MultiHeadAttention;
use crate::nn::layers::{Activation, LayerNorm, Linear};
use crate::nn::{Ctx, Init, ParamBuilder, ParamId};
use crate::vocab::PAD_ID;

/// How attended visual features are combined with the textual query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Elementwise product of attended features and the context query.
    QueryProduct,
    /// Attended features alone.
    AttendedOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TcmConfig {
    pub window: usize,
    pub embed_dim: usize,
    pub window_kernel: usize,
    pub heads: usize,
    pub fusion: Fusion,
}

impl TcmConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.window == 0 || self.embed_dim == 0 {
            return Err(HtrError::Config("context window and embedding must be non-empty".into()));
        }
        if self.window_kernel % 2 == 0 {
            return Err(HtrError::Config("context window kernel must be odd".into()));
        }
        if self.heads == 0 || self.heads > dim {
            return Err(HtrError::Config(format!(
                "{} context heads do not fit model dim {dim}",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Left/right label windows of one sequence, `T × k` each.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextWindows {
    pub left: Vec<Vec<usize>>,
    pub right: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
}

/// Windows for a label row of which the first `len` entries are real.
/// Out-of-range and padded neighbours read as the pad id.
pub fn build_windows(labels: &[usize], len: usize, k: usize) -> ContextWindows {
    let t = labels.len();
    let at = |j: isize| -> usize {
        if j >= 0 && (j as usize) < len {
            labels[j as usize]
        } else {
            PAD_ID
        }
    };
    let left = (0..t as isize)
        .map(|i| (i - k as isize..i).map(at).collect())
        .collect();
    let right = (0..t as isize)
        .map(|i| (i + 1..=i + k as isize).map(at).collect())
        .collect();
    let weights = (0..t).map(|i| if i < len { 1.0 } else { 0.0 }).collect();
    ContextWindows {
        left,
        right,
        weights,
    }
}

/// Weighted average of both directions' per-position losses for
/// one sample; zero when no position carries weight.
pub fn weighted_loss(left: &[f64], right: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    left.iter()
        .zip(right)
        .zip(weights)
        .map(|((l, r), w)| (l + r) * w)
        .sum::<f64>()
        / (2.0 * total)
}

#[derive(Clone, Debug)]
pub struct Tcm {
    pub cfg: TcmConfig,
    pub embedding: ParamId,
    pub window_conv: Linear,
    pub aggregate: Linear,
    pub transform: Linear,
    pub left_bias: ParamId,
    pub right_bias: ParamId,
    pub norm: LayerNorm,
    pub cross: MultiHeadAttention,
    pub classifier: Linear,
}

/// Both directions' logits for a batch, `[B, T, V]` each.
pub struct TcmOutput {
    pub left: Var,
    pub right: Var,
}

impl Tcm {
    pub fn new(pb: &mut ParamBuilder, cfg: &TcmConfig, dim: usize, classes: usize) -> Self {
        let e = cfg.embed_dim;
        Self {
            cfg: cfg.clone(),
            embedding: pb.weight("tcm.embedding".into(), &[classes, e], 1.0),
            window_conv: Linear::new(pb, "tcm.window_conv", cfg.window_kernel * e, e, true),
            aggregate: Linear::new(pb, "tcm.aggregate", cfg.window * e, dim, true),
            transform: Linear::new(pb, "tcm.transform", dim, dim, false),
            left_bias: pb.no_decay("tcm.left_bias".into(), &[dim], Init::Normal(0.02)),
            right_bias: pb.no_decay("tcm.right_bias".into(), &[dim], Init::Normal(0.02)),
            norm: LayerNorm::new(pb, "tcm.norm", dim),
            cross: MultiHeadAttention::new(pb, "tcm.cross_attn", dim, cfg.heads),
            classifier: Linear::new(pb, "tcm.classifier", dim, classes, true),
        }
    }

    /// Context queries `[B, T, D]` for `B` rows of `T × k` window ids.
    pub fn context(&self, ctx: &mut Ctx, windows: &[&[Vec<usize>]], bias: ParamId) -> Var {
        let (b, t, k) = (windows.len(), windows[0].len(), self.cfg.window);
        let e = self.cfg.embed_dim;
        let kw = self.cfg.window_kernel;
        let half = (kw / 2) as isize;
        // embedding lookup fused with the window convolution's unfolding
        let mut idx = Vec::with_capacity(b * t * k * kw * e);
        for rows in windows {
            for row in rows.iter() {
                for p in 0..k as isize {
                    for tap in -half..=half {
                        let q = p + tap;
                        if q < 0 || q >= k as isize {
                            idx.extend(std::iter::repeat_n(GATHER_ZERO, e));
                        } else {
                            let base = row[q as usize] * e;
                            idx.extend(base..base + e);
                        }
                    }
                }
            }
        }
        let emb = ctx.p(self.embedding);
        let cols = ctx.g.gather(emb, idx, &[b, t, k, kw * e]);
        let h = self.window_conv.forward(ctx, cols);
        let h = Activation::Silu.apply(ctx, h);
        let h = ctx.g.reshape(h, &[b, t, k * e]);
        let q = self.aggregate.forward(ctx, h);
        let q = self.transform.forward(ctx, q);
        let bv = ctx.p(bias);
        let q = ctx.g.add_suffix(q, bv);
        self.norm.forward(ctx, q)
    }

    /// Fuses a context query with the visual tokens and classifies, `[B, T, V]`.
    pub fn classify(&self, ctx: &mut Ctx, query: Var, visual: Var) -> Var {
        let (attended, _) = self.cross.forward(ctx, query, visual, None);
        let z = match self.cfg.fusion {
            Fusion::QueryProduct => ctx.g.mul(attended, query),
            Fusion::AttendedOnly => attended,
        };
        self.classifier.forward(ctx, z)
    }

    pub fn forward(&self, ctx: &mut Ctx, windows: &[ContextWindows], visual: Var) -> TcmOutput {
        let lefts: Vec<&[Vec<usize>]> = windows.iter().map(|w| w.left.as_slice()).collect();
        let rights: Vec<&[Vec<usize>]> = windows.iter().map(|w| w.right.as_slice()).collect();
        let ql = self.context(ctx, &lefts, self.left_bias);
        let qr = self.context(ctx, &rights, self.right_bias);
        TcmOutput {
            left: self.classify(ctx, ql, visual),
            right: self.classify(ctx, qr, visual),
        }
    }

    /// Batch-mean weighted loss against padded `labels` (`B` rows of `T`).
    pub fn loss(&self, ctx: &mut Ctx, out: &TcmOutput, labels: &[Vec<usize>], windows: &[ContextWindows]) -> Var {
        let s = ctx.g.shape(out.left).to_vec();
        let (b, t, v) = (s[0], s[1], s[2]);
        let targets: Vec<usize> = labels.iter().flatten().copied().collect();
        let ll = ctx.g.reshape(out.left, &[b * t, v]);
        let lr = ctx.g.reshape(out.right, &[b * t, v]);
        let cl = ctx.g.cross_entropy_rows(ll, &targets);
        let cr = ctx.g.cross_entropy_rows(lr, &targets);
        let both = ctx.g.add(cl, cr);
        let mut factors = Vec::with_capacity(b * t);
        for w in windows {
            let total: f64 = w.weights.iter().sum();
            factors.extend(w.weights.iter().map(|wi| {
                if total == 0.0 {
                    0.0
                } else {
                    wi / (2.0 * total * b as f64)
                }
            }));
        }
        let weighted = ctx.g.scale_rows(both, factors);
        ctx.g.sum_all(weighted)
    }
}
