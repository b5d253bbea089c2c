//! Sequence encoder: hybrid attention/convolution blocks arranged as a
//! one-level temporal U-Net.

use htr_autograd::{Var, GATHER_ZERO};

use crate::error::{HtrError, Result};
use crate::nn::attention::{attend, attention_width, MultiHeadAttention};
use crate::nn::layers::{
    drop_path, layer_scale, merge_heads, sinusoid_table, split_heads, Activation, FeedForward,
    LayerNorm, Linear,
};
use crate::nn::{Ctx, Init, ParamBuilder, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Attention, half FFN, depthwise convolution, half FFN.
    ConvText,
    /// Attention and FFN only, with absolute sinusoidal positions at the input.
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelativePosition {
    /// Projected sinusoidal offset embeddings with learned content and
    /// position biases.
    Sinusoidal,
    /// Learned per-head scalar per clipped offset.
    BiasTable { max_distance: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_ratio: f64,
    pub conv_kernel: usize,
    pub conv_expansion: usize,
    pub layerscale_init: f64,
    pub droppath_rate: f64,
    pub relative: RelativePosition,
    pub kind: BlockKind,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.heads > self.dim {
            return Err(HtrError::Config(format!(
                "{} heads do not fit model dim {}",
                self.heads, self.dim
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(HtrError::Config("conv kernel width must be odd".into()));
        }
        if self.layerscale_init <= 0.0 {
            return Err(HtrError::Config("LayerScale init must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.droppath_rate) {
            return Err(HtrError::Config("drop-path rate must lie in [0, 1)".into()));
        }
        if self.ffn_ratio <= 0.0 || self.conv_expansion == 0 {
            return Err(HtrError::Config("expansion ratios must be positive".into()));
        }
        Ok(())
    }

    fn ffn_hidden(&self) -> usize {
        ((self.dim as f64 * self.ffn_ratio).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub block: BlockConfig,
    /// Blocks before downsampling, at half resolution, and after upsampling.
    pub layout: (usize, usize, usize),
    /// Without downsampling all blocks run at full resolution in order.
    pub downsample: bool,
}

impl EncoderConfig {
    pub fn total_blocks(&self) -> usize {
        self.layout.0 + self.layout.1 + self.layout.2
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.total_blocks() == 0 {
            return Err(HtrError::Config("encoder needs at least one block".into()));
        }
        Ok(())
    }
}

/// Splits `n` blocks so half sit at low resolution and the rest are shared
/// before/after, the larger share first.
pub fn split_layout(n: usize) -> (usize, usize, usize) {
    let latent = n / 2;
    let rest = n - latent;
    (rest.div_ceil(2), latent, rest / 2)
}

#[derive(Clone, Debug)]
enum PositionTerm {
    Sinusoidal {
        proj: Linear,
        content_bias: ParamId,
        position_bias: ParamId,
    },
    Table {
        table: ParamId,
        max_distance: usize,
    },
}

/// Self-attention whose positional term depends only on the offset i − j.
#[derive(Clone, Debug)]
pub struct RelativeAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    position: PositionTerm,
}

impl RelativeAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, rel: RelativePosition) -> Self {
        let inner = attention_width(dim, heads);
        let position = match rel {
            RelativePosition::Sinusoidal => PositionTerm::Sinusoidal {
                proj: Linear::new(pb, &format!("{name}.pos_proj"), dim, inner, false),
                content_bias: pb.no_decay(format!("{name}.content_bias"), &[inner], Init::Zeros),
                position_bias: pb.no_decay(format!("{name}.position_bias"), &[inner], Init::Zeros),
            },
            RelativePosition::BiasTable { max_distance } => PositionTerm::Table {
                table: pb.no_decay(
                    format!("{name}.rel_bias"),
                    &[heads, 2 * max_distance + 1],
                    Init::Zeros,
                ),
                max_distance,
            },
        };
        Self {
            q: Linear::new(pb, &format!("{name}.q"), dim, inner, true),
            k: Linear::new(pb, &format!("{name}.k"), dim, inner, true),
            v: Linear::new(pb, &format!("{name}.v"), dim, inner, true),
            out: Linear::new(pb, &format!("{name}.out"), inner, dim, true),
            heads,
            position,
        }
    }

    /// Returns the output and the attention probabilities `[B·H, L, L]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> (Var, Var) {
        let s = ctx.g.shape(x).to_vec();
        let (b, l, d) = (s[0], s[1], s[2]);
        let h = self.heads;
        let dh = attention_width(d, h) / h;
        let q = self.q.forward(ctx, x);
        let k = self.k.forward(ctx, x);
        let v = self.v.forward(ctx, x);
        let k = split_heads(ctx, k, h);
        let v = split_heads(ctx, v, h);
        let (q_content, bias) = match &self.position {
            PositionTerm::Sinusoidal {
                proj,
                content_bias,
                position_bias,
            } => {
                let u = ctx.p(*content_bias);
                let qu = ctx.g.add_suffix(q, u);
                let pb = ctx.p(*position_bias);
                let qv = ctx.g.add_suffix(q, pb);
                // [B, L, H, dh] → [H, B·L, dh]
                let qv = ctx.g.reshape(qv, &[b, l, h, dh]);
                let qv = ctx.g.permute(qv, &[2, 0, 1, 3]);
                let qv = ctx.g.reshape(qv, &[h, b * l, dh]);
                // row r embeds offset r − (L − 1)
                let offsets: Vec<f64> = (0..2 * l - 1).map(|r| r as f64 - (l - 1) as f64).collect();
                let table = ctx.g.constant(sinusoid_table(&offsets, d));
                let r = proj.forward(ctx, table);
                let r = ctx.g.reshape(r, &[2 * l - 1, h, dh]);
                let r = ctx.g.permute(r, &[1, 0, 2]);
                let full = ctx.g.bmm(qv, r, false, true);
                let w = 2 * l - 1;
                let mut idx = Vec::with_capacity(b * h * l * l);
                for bi in 0..b {
                    for hi in 0..h {
                        for i in 0..l {
                            let row = hi * b * l * w + (bi * l + i) * w;
                            idx.extend((0..l).map(|j| row + i + l - 1 - j));
                        }
                    }
                }
                (qu, ctx.g.gather(full, idx, &[b * h, l, l]))
            }
            PositionTerm::Table {
                table,
                max_distance,
            } => {
                let m = *max_distance as isize;
                let w = 2 * max_distance + 1;
                let mut idx = Vec::with_capacity(b * h * l * l);
                for _ in 0..b {
                    for hi in 0..h {
                        for i in 0..l {
                            idx.extend((0..l).map(|j| {
                                hi * w + ((i as isize - j as isize).clamp(-m, m) + m) as usize
                            }));
                        }
                    }
                }
                let t = ctx.p(*table);
                (q, ctx.g.gather(t, idx, &[b * h, l, l]))
            }
        };
        let q = split_heads(ctx, q_content, h);
        let (o, p) = attend(ctx, q, k, v, Some(bias));
        if ctx.capturing_attention() {
            let probs = ctx.g.value(p).clone().reshaped(&[b, h, l, l]);
            ctx.push_attention(probs);
        }
        let o = merge_heads(ctx, o, h);
        (self.out.forward(ctx, o), p)
    }
}

/// Pointwise expansion, depthwise 1-D convolution, LayerNorm, SiLU, pointwise projection.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub expand: Linear,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub norm: LayerNorm,
    pub project: Linear,
    pub kernel: usize,
}

impl ConvModule {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, expansion: usize, kernel: usize) -> Self {
        let inner = dim * expansion;
        Self {
            expand: Linear::new(pb, &format!("{name}.expand"), dim, inner, true),
            depthwise: pb.weight(
                format!("{name}.depthwise.weight"),
                &[inner, kernel],
                (1.0 / kernel as f64).sqrt(),
            ),
            depthwise_bias: pb.no_decay(format!("{name}.depthwise.bias"), &[inner], Init::Zeros),
            norm: LayerNorm::new(pb, &format!("{name}.norm"), inner),
            project: Linear::new(pb, &format!("{name}.project"), inner, dim, true),
            kernel,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.expand.forward(ctx, x);
        let w = ctx.p(self.depthwise);
        let h = ctx.g.depthwise_conv1d(h, w, self.kernel / 2);
        let bias = ctx.p(self.depthwise_bias);
        let h = ctx.g.add_suffix(h, bias);
        let h = self.norm.forward(ctx, h);
        let h = ctx.g.silu(h);
        self.project.forward(ctx, h)
    }
}

/// One post-norm residual stage: `LN(x + weight · LayerScale(DropPath(branch)))`.
#[derive(Clone, Debug)]
struct Residual {
    scale: ParamId,
    norm: LayerNorm,
    weight: f64,
}

impl Residual {
    fn new(pb: &mut ParamBuilder, name: &str, cfg: &BlockConfig, weight: f64) -> Self {
        Self {
            scale: layer_scale(pb, name, cfg.dim, cfg.layerscale_init),
            norm: LayerNorm::new(pb, &format!("{name}.norm"), cfg.dim),
            weight,
        }
    }

    fn apply(&self, ctx: &mut Ctx, x: Var, branch: Var, droppath: f64) -> Var {
        let y = drop_path(ctx, branch, droppath);
        let s = ctx.p(self.scale);
        let y = ctx.g.mul_suffix(y, s);
        let y = if self.weight == 1.0 { y } else { ctx.g.scale(y, self.weight) };
        let y = ctx.g.add(x, y);
        self.norm.forward(ctx, y)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTextBlock {
    attn: RelativeAttention,
    ffn1: FeedForward,
    conv: ConvModule,
    ffn2: FeedForward,
    res: [Residual; 4],
    droppath: f64,
}

impl ConvTextBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &BlockConfig, droppath: f64) -> Self {
        let hidden = cfg.ffn_hidden();
        Self {
            attn: RelativeAttention::new(pb, &format!("{name}.attn"), cfg.dim, cfg.heads, cfg.relative),
            ffn1: FeedForward::new(pb, &format!("{name}.ffn1"), cfg.dim, hidden, Activation::Silu),
            conv: ConvModule::new(pb, &format!("{name}.conv"), cfg.dim, cfg.conv_expansion, cfg.conv_kernel),
            ffn2: FeedForward::new(pb, &format!("{name}.ffn2"), cfg.dim, hidden, Activation::Silu),
            res: [
                Residual::new(pb, &format!("{name}.res_attn"), cfg, 1.0),
                Residual::new(pb, &format!("{name}.res_ffn1"), cfg, 0.5),
                Residual::new(pb, &format!("{name}.res_conv"), cfg, 1.0),
                Residual::new(pb, &format!("{name}.res_ffn2"), cfg, 0.5),
            ],
            droppath,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let (a, _) = self.attn.forward(ctx, x);
        let x = self.res[0].apply(ctx, x, a, self.droppath);
        let f = self.ffn1.forward(ctx, x);
        let x = self.res[1].apply(ctx, x, f, self.droppath);
        let c = self.conv.forward(ctx, x);
        let x = self.res[2].apply(ctx, x, c, self.droppath);
        let f = self.ffn2.forward(ctx, x);
        self.res[3].apply(ctx, x, f, self.droppath)
    }
}

/// Plain post-norm attention + FFN block used by the baseline configuration.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    attn: MultiHeadAttention,
    ffn: FeedForward,
    res: [Residual; 2],
    droppath: f64,
}

impl TransformerBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &BlockConfig, droppath: f64) -> Self {
        Self {
            attn: MultiHeadAttention::new(pb, &format!("{name}.attn"), cfg.dim, cfg.heads),
            ffn: FeedForward::new(pb, &format!("{name}.ffn"), cfg.dim, cfg.ffn_hidden(), Activation::Silu),
            res: [
                Residual::new(pb, &format!("{name}.res_attn"), cfg, 1.0),
                Residual::new(pb, &format!("{name}.res_ffn"), cfg, 1.0),
            ],
            droppath,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let (a, p) = self.attn.forward(ctx, x, x, None);
        if ctx.capturing_attention() {
            let s = ctx.g.shape(x).to_vec();
            let h = self.attn.heads;
            let probs = ctx.g.value(p).clone().reshaped(&[s[0], h, s[1], s[1]]);
            ctx.push_attention(probs);
        }
        let x = self.res[0].apply(ctx, x, a, self.droppath);
        let f = self.ffn.forward(ctx, x);
        self.res[1].apply(ctx, x, f, self.droppath)
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    ConvText(ConvTextBlock),
    Transformer(TransformerBlock),
}

impl Block {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        match self {
            Block::ConvText(b) => b.forward(ctx, x),
            Block::Transformer(b) => b.forward(ctx, x),
        }
    }
}

/// Halves the sequence with a width-3, stride-2 convolution (zero padding of
/// one on the left). Odd lengths are first extended by repeating the last token.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub proj: Linear,
}

impl Downsample {
    pub const KERNEL: usize = 3;

    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        Self {
            proj: Linear::new(pb, name, Self::KERNEL * dim, dim, true),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = ctx.g.shape(x).to_vec();
        let (b, l, d) = (s[0], s[1], s[2]);
        if l == 0 {
            return Err(HtrError::Shape("cannot downsample an empty sequence".into()));
        }
        let lo = l.div_ceil(2);
        let mut idx = Vec::with_capacity(b * lo * Self::KERNEL * d);
        for bi in 0..b {
            for o in 0..lo {
                for t in 0..Self::KERNEL {
                    let src = (2 * o + t) as isize - 1;
                    if src < 0 {
                        idx.extend(std::iter::repeat_n(GATHER_ZERO, d));
                    } else {
                        let src = (src as usize).min(l - 1);
                        let base = (bi * l + src) * d;
                        idx.extend(base..base + d);
                    }
                }
            }
        }
        let cols = ctx.g.gather(x, idx, &[b, lo, Self::KERNEL * d]);
        Ok(self.proj.forward(ctx, cols))
    }
}

/// Nearest-neighbour doubling of `low`, cropped to the skip length, plus `skip`.
pub fn upsample_fuse(ctx: &mut Ctx, low: Var, skip: Var) -> Result<Var> {
    let ls = ctx.g.shape(low).to_vec();
    let ss = ctx.g.shape(skip).to_vec();
    let (b, n, d) = (ls[0], ls[1], ls[2]);
    let l = ss[1];
    if ss[0] != b || ss[2] != d || !(l == 2 * n || l + 1 == 2 * n) {
        return Err(HtrError::Shape(format!(
            "cannot fuse low-resolution {ls:?} into skip {ss:?}"
        )));
    }
    let mut idx = Vec::with_capacity(b * l * d);
    for bi in 0..b {
        for i in 0..l {
            let base = (bi * n + i / 2) * d;
            idx.extend(base..base + d);
        }
    }
    let up = ctx.g.gather(low, idx, &[b, l, d]);
    Ok(ctx.g.add(up, skip))
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub pre: Vec<Block>,
    pub down: Option<Downsample>,
    pub latent: Vec<Block>,
    pub post: Vec<Block>,
    absolute_positions: bool,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &EncoderConfig) -> Self {
        let n = cfg.total_blocks();
        let mut i = 0;
        let mut make = |pb: &mut ParamBuilder, count: usize| -> Vec<Block> {
            (0..count)
                .map(|_| {
                    let rate = if n > 1 {
                        cfg.block.droppath_rate * i as f64 / (n - 1) as f64
                    } else {
                        0.0
                    };
                    let name = format!("encoder.block{i}");
                    i += 1;
                    match cfg.block.kind {
                        BlockKind::ConvText => Block::ConvText(ConvTextBlock::new(pb, &name, &cfg.block, rate)),
                        BlockKind::Transformer => {
                            Block::Transformer(TransformerBlock::new(pb, &name, &cfg.block, rate))
                        }
                    }
                })
                .collect()
        };
        if cfg.downsample {
            let pre = make(pb, cfg.layout.0);
            let down = Downsample::new(pb, "encoder.downsample", cfg.block.dim);
            let latent = make(pb, cfg.layout.1);
            let post = make(pb, cfg.layout.2);
            Self {
                pre,
                down: Some(down),
                latent,
                post,
                absolute_positions: cfg.block.kind == BlockKind::Transformer,
            }
        } else {
            Self {
                pre: make(pb, n),
                down: None,
                latent: Vec::new(),
                post: Vec::new(),
                absolute_positions: cfg.block.kind == BlockKind::Transformer,
            }
        }
    }

    /// `[B, L, D]` → `[B, L, D]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = ctx.g.shape(x).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(HtrError::Shape(format!("encoder input {s:?} is not [B, L>0, D]")));
        }
        let mut x = x;
        if self.absolute_positions {
            let pos: Vec<f64> = (0..s[1]).map(|i| i as f64).collect();
            let table = ctx.g.constant(sinusoid_table(&pos, s[2]));
            x = ctx.g.add_suffix(x, table);
        }
        for b in &self.pre {
            x = b.forward(ctx, x);
        }
        if let Some(down) = &self.down {
            let skip = x;
            let mut y = down.forward(ctx, x)?;
            for b in &self.latent {
                y = b.forward(ctx, y);
            }
            x = upsample_fuse(ctx, y, skip)?;
            for b in &self.post {
                x = b.forward(ctx, x);
            }
        }
        Ok(x)
    }
}
