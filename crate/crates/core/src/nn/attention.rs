//! Multi-head attention pieces.

use htr_autograd::Var;

use super::ctx::Ctx;
use super::layers::{merge_heads, split_heads, Linear};
use super::params::{Init, ParamBuilder, ParamId};

/// Width of the concatenated heads: the largest multiple of `heads` not
/// exceeding `dim`, so head counts that do not divide the model width still
/// instantiate.
pub fn attention_width(dim: usize, heads: usize) -> usize {
    heads * (dim / heads)
}

/// Softmax attention over `[B·H, Lq, dh]` queries and `[B·H, Lk, dh]` keys and
/// values. `scores` is added to the scaled content scores before the softmax.
/// Returns the attended values and the attention probabilities.
pub fn attend(ctx: &mut Ctx, q: Var, k: Var, v: Var, scores: Option<Var>) -> (Var, Var) {
    let dh = ctx.g.shape(q)[2];
    let s = ctx.g.bmm(q, k, false, true);
    let s = match scores {
        Some(extra) => ctx.g.add(s, extra),
        None => s,
    };
    let s = ctx.g.scale(s, 1.0 / (dh as f64).sqrt());
    let p = ctx.g.softmax(s);
    (ctx.g.bmm(p, v, false, false), p)
}

/// Learned per-head bias indexed by 2-D offset between grid cells. Offsets
/// beyond the table span are clipped to its edge.
#[derive(Clone, Debug)]
pub struct GridBias {
    pub table: ParamId,
    pub heads: usize,
    pub span: (usize, usize),
}

impl GridBias {
    pub fn new(pb: &mut ParamBuilder, name: &str, heads: usize, span: (usize, usize)) -> Self {
        let cells = (2 * span.0 - 1) * (2 * span.1 - 1);
        Self {
            table: pb.no_decay(format!("{name}.rel_bias"), &[heads, cells], Init::Zeros),
            heads,
            span,
        }
    }

    /// Bias for a `grid.0 × grid.1` cell grid, `[batch·heads, N, N]`.
    pub fn scores(&self, ctx: &mut Ctx, batch: usize, grid: (usize, usize)) -> Var {
        let (sh, sw) = (self.span.0 as isize - 1, self.span.1 as isize - 1);
        let row = 2 * self.span.1 - 1;
        let cells = (2 * self.span.0 - 1) * row;
        let n = grid.0 * grid.1;
        let mut idx = Vec::with_capacity(batch * self.heads * n * n);
        for _ in 0..batch {
            for h in 0..self.heads {
                for i in 0..n {
                    for j in 0..n {
                        let dy = ((i / grid.1) as isize - (j / grid.1) as isize).clamp(-sh, sh);
                        let dx = ((i % grid.1) as isize - (j % grid.1) as isize).clamp(-sw, sw);
                        idx.push(h * cells + (dy + sh) as usize * row + (dx + sw) as usize);
                    }
                }
            }
        }
        let t = ctx.p(self.table);
        ctx.g.gather(t, idx, &[batch * self.heads, n, n])
    }
}

/// Multi-head attention with separate query/key/value projections. Used as
/// self-attention by passing the same sequence twice.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Self {
        let inner = attention_width(dim, heads);
        Self {
            q: Linear::new(pb, &format!("{name}.q"), dim, inner, true),
            k: Linear::new(pb, &format!("{name}.k"), dim, inner, true),
            v: Linear::new(pb, &format!("{name}.v"), dim, inner, true),
            out: Linear::new(pb, &format!("{name}.out"), inner, dim, true),
            heads,
        }
    }

    /// `query: [B, T, D]`, `memory: [B, L, D]`, optional score bias
    /// `[B·H, T, L]` → `([B, T, D], probs [B·H, T, L])`.
    pub fn forward(&self, ctx: &mut Ctx, query: Var, memory: Var, bias: Option<Var>) -> (Var, Var) {
        let q = self.q.forward(ctx, query);
        let k = self.k.forward(ctx, memory);
        let v = self.v.forward(ctx, memory);
        let q = split_heads(ctx, q, self.heads);
        let k = split_heads(ctx, k, self.heads);
        let v = split_heads(ctx, v, self.heads);
        let (o, p) = attend(ctx, q, k, v, bias);
        let o = merge_heads(ctx, o, self.heads);
        (self.out.forward(ctx, o), p)
    }
}
