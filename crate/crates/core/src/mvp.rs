//! Image feature extractor: a residual CNN with MobileViT-style blocks and a
//! switchable positional encoding, producing the visual token sequence.

use htr_autograd::Var;

use crate::data::Geometry;
use crate::error::{HtrError, Result};
use crate::nn::attention::{GridBias, MultiHeadAttention};
use crate::nn::layers::{Activation, BatchNorm, Conv2d, ConvBn, FeedForward, LayerNorm, Linear};
use crate::nn::{Ctx, Init, ParamBuilder, ParamId};

/// How positional information enters the MobileViT blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeVariant {
    None,
    /// Learned additive grid, fixed to the configured feature-map size.
    Learned,
    /// Learned 2-D relative bias inside the patch attention.
    Relative,
    /// Depthwise 3×3 convolution with an identity residual.
    Conditional,
}

impl std::str::FromStr for PeVariant {
    type Err = HtrError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(PeVariant::None),
            "lpe" | "learned" => Ok(PeVariant::Learned),
            "rpe" | "relative" => Ok(PeVariant::Relative),
            "cpe" | "conditional" => Ok(PeVariant::Conditional),
            other => Err(HtrError::Config(format!(
                "unknown positional encoding {other:?} (none, lpe, rpe, cpe)"
            ))),
        }
    }
}

impl std::fmt::Display for PeVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PeVariant::None => "none",
            PeVariant::Learned => "lpe",
            PeVariant::Relative => "rpe",
            PeVariant::Conditional => "cpe",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MvpConfig {
    pub geometry: Geometry,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    /// Downsampling of the first block of each stage.
    pub stage_strides: Vec<(usize, usize)>,
    pub blocks_per_stage: usize,
    /// Stages (0-based) followed by a MobileViT block.
    pub mv_placement: Vec<usize>,
    /// Transformer width of each placed MobileViT block.
    pub mv_dims: Vec<usize>,
    pub mv_depth: usize,
    pub mv_heads: usize,
    pub mv_ffn_ratio: usize,
    pub patch: (usize, usize),
    pub pe: PeVariant,
    pub token_dim: usize,
}

/// The stem halves twice (strided conv, then max-pool).
pub const STEM_STRIDE: (usize, usize) = (4, 4);

impl MvpConfig {
    /// Total downsampling `(S_h, S_w)`.
    pub fn total_stride(&self) -> (usize, usize) {
        self.stage_strides
            .iter()
            .fold(STEM_STRIDE, |(h, w), &(sh, sw)| (h * sh, w * sw))
    }

    /// Feature-map size after stage `s` for the configured geometry.
    pub fn stage_size(&self, s: usize) -> (usize, usize) {
        self.stage_strides[..=s]
            .iter()
            .fold(
                (
                    self.geometry.height.div_ceil(2).div_ceil(2),
                    self.geometry.width.div_ceil(2).div_ceil(2),
                ),
                |(h, w), &(sh, sw)| (h.div_ceil(sh), w.div_ceil(sw)),
            )
    }

    pub fn feature_size(&self) -> (usize, usize) {
        self.stage_size(self.stage_channels.len() - 1)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.feature_size();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HtrError::Config(m));
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_strides.len() {
            return err("stage channels and strides must be non-empty and of equal length".into());
        }
        if self.mv_placement.len() != self.mv_dims.len() {
            return err("one MobileViT width per placed block is required".into());
        }
        if self.mv_placement.iter().any(|&s| s >= self.stage_channels.len()) {
            return err("MobileViT block placed after a stage that does not exist".into());
        }
        if self.mv_dims.iter().any(|&d| self.mv_heads == 0 || d % self.mv_heads != 0) {
            return err("MobileViT width must be divisible by its head count".into());
        }
        let (sh, sw) = self.total_stride();
        if self.geometry.height % sh != 0 || self.geometry.width % sw != 0 {
            return err(format!(
                "image {}x{} is not divisible by the total stride {sh}x{sw}",
                self.geometry.height, self.geometry.width
            ));
        }
        for &s in &self.mv_placement {
            let (h, w) = self.stage_size(s);
            if h % self.patch.0 != 0 || w % self.patch.1 != 0 {
                return err(format!(
                    "stage {s} output {h}x{w} is not divisible by patch {:?}",
                    self.patch
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    a: ConvBn,
    b: ConvBn,
    shortcut: Option<ConvBn>,
}

fn conv_bn(
    pb: &mut ParamBuilder,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: (usize, usize),
    act: Option<Activation>,
) -> ConvBn {
    ConvBn {
        conv: Conv2d::new(pb, &format!("{name}.conv"), cin, cout, (k, k), stride, (k / 2, k / 2), false),
        bn: BatchNorm::new(pb, &format!("{name}.bn"), cout),
        act,
    }
}

impl BasicBlock {
    fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, stride: (usize, usize)) -> Self {
        let relu = Some(Activation::Relu);
        let shortcut = (stride != (1, 1) || cin != cout)
            .then(|| conv_bn(pb, &format!("{name}.shortcut"), cin, cout, 1, stride, None));
        Self {
            a: conv_bn(pb, &format!("{name}.a"), cin, cout, 3, stride, relu),
            b: conv_bn(pb, &format!("{name}.b"), cout, cout, 3, (1, 1), None),
            shortcut,
        }
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let y = self.a.forward(ctx, x);
        let y = self.b.forward(ctx, y);
        let s = match &self.shortcut {
            Some(sc) => sc.forward(ctx, x),
            None => x,
        };
        let y = ctx.g.add(y, s);
        ctx.g.relu(y)
    }
}

#[derive(Clone, Debug)]
struct PatchLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
enum PositionalEncoding {
    None,
    Learned { grid: ParamId, size: (usize, usize) },
    Relative,
    Conditional { weight: ParamId, bias: ParamId },
}

/// Local convolution, unfold into per-offset patch sequences, transformer,
/// fold back, then fuse with the block input.
#[derive(Clone, Debug)]
pub struct MobileVitBlock {
    local: ConvBn,
    to_tokens: Conv2d,
    pe: PositionalEncoding,
    grid_bias: Option<GridBias>,
    layers: Vec<PatchLayer>,
    norm: LayerNorm,
    from_tokens: ConvBn,
    fuse: ConvBn,
    patch: (usize, usize),
}

impl MobileVitBlock {
    /// `size` is the feature-map size this block sees at the configured geometry.
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, dim: usize, cfg: &MvpConfig, size: (usize, usize)) -> Self {
        let silu = Some(Activation::Silu);
        let grid = (size.0 / cfg.patch.0, size.1 / cfg.patch.1);
        let pe = match cfg.pe {
            PeVariant::None => PositionalEncoding::None,
            PeVariant::Learned => PositionalEncoding::Learned {
                grid: pb.no_decay(format!("{name}.pos_grid"), &[dim, size.0, size.1], Init::Normal(0.02)),
                size,
            },
            PeVariant::Relative => PositionalEncoding::Relative,
            PeVariant::Conditional => PositionalEncoding::Conditional {
                weight: pb.weight(format!("{name}.cpe.weight"), &[dim, 1, 3, 3], 1.0 / 3.0),
                bias: pb.no_decay(format!("{name}.cpe.bias"), &[dim], Init::Zeros),
            },
        };
        let grid_bias = (cfg.pe == PeVariant::Relative)
            .then(|| GridBias::new(pb, &format!("{name}.attn_bias"), cfg.mv_heads, grid));
        let layers = (0..cfg.mv_depth)
            .map(|i| {
                let n = format!("{name}.layer{i}");
                PatchLayer {
                    norm1: LayerNorm::new(pb, &format!("{n}.norm1"), dim),
                    attn: MultiHeadAttention::new(pb, &format!("{n}.attn"), dim, cfg.mv_heads),
                    norm2: LayerNorm::new(pb, &format!("{n}.norm2"), dim),
                    ffn: FeedForward::new(pb, &format!("{n}.ffn"), dim, dim * cfg.mv_ffn_ratio, Activation::Silu),
                }
            })
            .collect();
        Self {
            local: conv_bn(pb, &format!("{name}.local"), channels, channels, 3, (1, 1), silu),
            to_tokens: Conv2d::square(pb, &format!("{name}.to_tokens"), channels, dim, 1, true),
            pe,
            grid_bias,
            layers,
            norm: LayerNorm::new(pb, &format!("{name}.norm"), dim),
            from_tokens: conv_bn(pb, &format!("{name}.from_tokens"), dim, channels, 1, (1, 1), silu),
            fuse: conv_bn(pb, &format!("{name}.fuse"), 2 * channels, channels, 3, (1, 1), silu),
            patch: cfg.patch,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = ctx.g.shape(x).to_vec();
        let (b, h, w) = (s[0], s[2], s[3]);
        let (ph, pw) = self.patch;
        if h % ph != 0 || w % pw != 0 {
            return Err(HtrError::Shape(format!(
                "feature map {h}x{w} is not divisible by patch {ph}x{pw}"
            )));
        }
        let y = self.local.forward(ctx, x);
        let y = self.to_tokens.forward(ctx, y);
        let y = self.positional(ctx, y, (h, w))?;
        let d = ctx.g.shape(y)[1];
        let mut t = unfold(ctx, y, self.patch);
        let grid = (h / ph, w / pw);
        let bias = self.grid_bias.as_ref().map(|gb| gb.scores(ctx, b * ph * pw, grid));
        for layer in &self.layers {
            let n = layer.norm1.forward(ctx, t);
            let (a, _) = layer.attn.forward(ctx, n, n, bias);
            t = ctx.g.add(t, a);
            let n = layer.norm2.forward(ctx, t);
            let f = layer.ffn.forward(ctx, n);
            t = ctx.g.add(t, f);
        }
        let t = self.norm.forward(ctx, t);
        let y = fold(ctx, t, b, d, (h, w), self.patch);
        let y = self.from_tokens.forward(ctx, y);
        let cat = ctx.g.concat(&[x, y], 1);
        Ok(self.fuse.forward(ctx, cat))
    }

    fn positional(&self, ctx: &mut Ctx, y: Var, size: (usize, usize)) -> Result<Var> {
        Ok(match &self.pe {
            PositionalEncoding::None | PositionalEncoding::Relative => y,
            PositionalEncoding::Learned { grid, size: fixed } => {
                if *fixed != size {
                    return Err(HtrError::Shape(format!(
                        "learned positional grid is {fixed:?} but the feature map is {size:?}"
                    )));
                }
                let g = ctx.p(*grid);
                ctx.g.add_suffix(y, g)
            }
            PositionalEncoding::Conditional { weight, bias } => conditional_pe(ctx, y, *weight, *bias),
        })
    }
}

/// `x + dwconv3x3(x) + bias`.
pub fn conditional_pe(ctx: &mut Ctx, x: Var, weight: ParamId, bias: ParamId) -> Var {
    let w = ctx.p(weight);
    let c = ctx.g.depthwise_conv2d(x, w, (1, 1), (1, 1));
    let b = ctx.p(bias);
    let c = ctx.g.add_channel(c, b);
    ctx.g.add(x, c)
}

/// `[B·P, N, d]` patch sequences back to a `[B, d, H, W]` map.
pub fn fold(ctx: &mut Ctx, t: Var, b: usize, d: usize, size: (usize, usize), patch: (usize, usize)) -> Var {
    let (ph, pw) = patch;
    let (gh, gw) = (size.0 / ph, size.1 / pw);
    let t = ctx.g.reshape(t, &[b, ph, pw, gh, gw, d]);
    let t = ctx.g.permute(t, &[0, 5, 3, 1, 4, 2]);
    ctx.g.reshape(t, &[b, d, size.0, size.1])
}

/// `[B, d, H, W]` to `[B·P, N, d]` sequences, one per offset inside a patch:
/// `[B, d, gh, ph, gw, pw]` → `[B, ph, pw, gh, gw, d]`.
pub fn unfold(ctx: &mut Ctx, x: Var, patch: (usize, usize)) -> Var {
    let s = ctx.g.shape(x).to_vec();
    let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
    let (ph, pw) = patch;
    let t = ctx.g.reshape(x, &[b, d, h / ph, ph, w / pw, pw]);
    let t = ctx.g.permute(t, &[0, 3, 5, 2, 4, 1]);
    ctx.g.reshape(t, &[b * ph * pw, (h / ph) * (w / pw), d])
}

#[derive(Clone, Debug)]
pub struct MvpExtractor {
    stem: ConvBn,
    stages: Vec<(Vec<BasicBlock>, Option<MobileVitBlock>)>,
    to_tokens: Option<Linear>,
    geometry: Geometry,
}

impl MvpExtractor {
    pub fn new(pb: &mut ParamBuilder, cfg: &MvpConfig) -> Self {
        let stem = ConvBn {
            conv: Conv2d::new(pb, "mvp.stem.conv", 1, cfg.stem_channels, (7, 7), (2, 2), (3, 3), false),
            bn: BatchNorm::new(pb, "mvp.stem.bn", cfg.stem_channels),
            act: Some(Activation::Relu),
        };
        let mut cin = cfg.stem_channels;
        let mut stages = Vec::new();
        for (s, (&c, &stride)) in cfg.stage_channels.iter().zip(&cfg.stage_strides).enumerate() {
            let blocks = (0..cfg.blocks_per_stage)
                .map(|i| {
                    let (input, st) = if i == 0 { (cin, stride) } else { (c, (1, 1)) };
                    BasicBlock::new(pb, &format!("mvp.stage{s}.block{i}"), input, c, st)
                })
                .collect();
            cin = c;
            let mv = cfg.mv_placement.iter().position(|&p| p == s).map(|k| {
                MobileVitBlock::new(pb, &format!("mvp.stage{s}.mobilevit"), c, cfg.mv_dims[k], cfg, cfg.stage_size(s))
            });
            stages.push((blocks, mv));
        }
        let to_tokens = (cin != cfg.token_dim).then(|| Linear::new(pb, "mvp.to_tokens", cin, cfg.token_dim, true));
        Self {
            stem,
            stages,
            to_tokens,
            geometry: cfg.geometry,
        }
    }

    /// `[B, 1, H, W]` images to the final feature map `[B, C, H', W']`.
    pub fn features(&self, ctx: &mut Ctx, images: Var) -> Result<Var> {
        let s = ctx.g.shape(images).to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(HtrError::Shape(format!("expected [B, 1, H, W] images, got {s:?}")));
        }
        let x = self.stem.forward(ctx, images);
        let mut x = ctx.g.max_pool2d(x, (3, 3), (2, 2), (1, 1));
        for (blocks, mv) in &self.stages {
            for b in blocks {
                x = b.forward(ctx, x);
            }
            if let Some(mv) = mv {
                x = mv.forward(ctx, x)?;
            }
        }
        Ok(x)
    }

    /// Row-major flattening of the feature map into `[B, H'·W', D]` tokens.
    pub fn forward(&self, ctx: &mut Ctx, images: Var) -> Result<Var> {
        let s = ctx.g.shape(images).to_vec();
        if s.len() == 4 && (s[2], s[3]) != (self.geometry.height, self.geometry.width) {
            return Err(HtrError::Shape(format!(
                "images are {}x{} but the model expects {}x{}",
                s[2], s[3], self.geometry.height, self.geometry.width
            )));
        }
        let f = self.features(ctx, images)?;
        Ok(self.tokens_from(ctx, f))
    }

    pub fn tokens_from(&self, ctx: &mut Ctx, f: Var) -> Var {
        let s = ctx.g.shape(f).to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let t = ctx.g.permute(f, &[0, 2, 3, 1]);
        let t = ctx.g.reshape(t, &[b, h * w, c]);
        match &self.to_tokens {
            Some(p) => p.forward(ctx, t),
            None => t,
        }
    }
}
