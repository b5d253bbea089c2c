//! Run configuration: presets plus flat `key = value` overrides.

use std::fmt::Write as _;
use std::path::Path;

use toml::{Table, Value};

use crate::data::Geometry;
use crate::encoder::{split_layout, BlockConfig, BlockKind, EncoderConfig, RelativePosition};
use crate::error::{HtrError, Result};
use crate::model::{LossWeights, ModelConfig};
use crate::mvp::{MvpConfig, PeVariant};
use crate::tcm::{Fusion, TcmConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Small enough to train in minutes on one CPU core.
    Micro,
    /// Full-size model on 64×512 lines.
    Reference,
}

impl std::str::FromStr for Preset {
    type Err = HtrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Preset::Micro),
            "reference" => Ok(Preset::Reference),
            _ => Err(HtrError::Config(format!("unknown preset {s:?} (micro, reference)"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Micro => "micro",
            Preset::Reference => "reference",
        })
    }
}

/// Component ablations, from a plain transformer on a residual backbone up
/// to the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Residual CNN + transformer blocks, no hierarchy, no context branch.
    A,
    /// A with hybrid blocks in the temporal U-Net.
    B,
    /// B with the context branch.
    C,
    /// C with MobileViT blocks in the extractor: the full model.
    D,
}

impl std::str::FromStr for Ablation {
    type Err = HtrError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Ablation::A),
            "B" => Ok(Ablation::B),
            "C" => Ok(Ablation::C),
            "D" => Ok(Ablation::D),
            _ => Err(HtrError::Config(format!("unknown ablation {s:?} (A, B, C, D)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_lr: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub batch_train: usize,
    pub batch_val: usize,
    pub loss: LossWeights,
    /// Pick the best validation checkpoint by the EMA weights rather than the raw ones.
    pub select_ema: bool,
    pub augment: bool,
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(HtrError::Config(m.into()));
        if self.total_iters == 0 || self.warmup_iters >= self.total_iters {
            return err("warmup_iters must be smaller than a positive total_iters");
        }
        if !(0.0..1.0).contains(&self.ema_decay) || self.ema_decay == 0.0 {
            return err("ema_decay must lie in (0, 1)");
        }
        if self.max_lr <= 0.0 || self.weight_decay < 0.0 {
            return err("max_lr must be positive and weight_decay non-negative");
        }
        if self.batch_train == 0 || self.batch_val == 0 || self.eval_every == 0 {
            return err("batch sizes and eval_every must be positive");
        }
        if self.loss.ctc < 0.0 || self.loss.tcm < 0.0 {
            return err("loss weights must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub preset: Preset,
    pub train: TrainConfig,
    pub mvp: MvpConfig,
    pub encoder: EncoderConfig,
    pub tcm: TcmConfig,
    pub use_tcm: bool,
}

impl Config {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Reference => Self::reference(),
            Preset::Micro => Self::micro(),
        }
    }

    fn reference() -> Self {
        let dim = 512;
        Self {
            preset: Preset::Reference,
            train: TrainConfig {
                seed: 0,
                max_lr: 1e-3,
                warmup_iters: 1000,
                total_iters: 100_000,
                weight_decay: 0.05,
                ema_decay: 0.9999,
                batch_train: 64,
                batch_val: 8,
                loss: LossWeights::default(),
                select_ema: true,
                augment: true,
                eval_every: 1000,
            },
            mvp: MvpConfig {
                geometry: Geometry::REFERENCE,
                stem_channels: 64,
                stage_channels: vec![64, 128, 256, 512],
                stage_strides: vec![(1, 1), (2, 2), (2, 1), (2, 1)],
                blocks_per_stage: 2,
                mv_placement: vec![2, 3],
                mv_dims: vec![144, 192],
                mv_depth: 2,
                mv_heads: 4,
                mv_ffn_ratio: 2,
                patch: (2, 2),
                pe: PeVariant::Conditional,
                token_dim: dim,
            },
            encoder: EncoderConfig {
                block: BlockConfig {
                    dim,
                    heads: 8,
                    ffn_ratio: 4.0,
                    conv_kernel: 7,
                    conv_expansion: 1,
                    layerscale_init: 1e-5,
                    droppath_rate: 0.1,
                    relative: RelativePosition::Sinusoidal,
                    kind: BlockKind::ConvText,
                },
                layout: split_layout(8),
                downsample: true,
            },
            tcm: TcmConfig {
                window: 4,
                embed_dim: 256,
                window_kernel: 3,
                heads: 4,
                fusion: Fusion::QueryProduct,
            },
            use_tcm: true,
        }
    }

    fn micro() -> Self {
        let dim = 48;
        let mut c = Self::reference();
        c.preset = Preset::Micro;
        c.train.max_lr = 2e-3;
        c.train.warmup_iters = 100;
        c.train.total_iters = 2000;
        c.train.batch_train = 16;
        c.train.augment = false;
        c.train.eval_every = 250;
        c.mvp = MvpConfig {
            geometry: Geometry {
                height: 32,
                width: 256,
            },
            stem_channels: 8,
            stage_channels: vec![8, 16, 16, 32],
            stage_strides: vec![(1, 1), (2, 2), (2, 1), (1, 1)],
            blocks_per_stage: 1,
            mv_placement: vec![2, 3],
            mv_dims: vec![16, 16],
            mv_depth: 1,
            mv_heads: 2,
            mv_ffn_ratio: 2,
            patch: (2, 2),
            pe: PeVariant::Conditional,
            token_dim: dim,
        };
        c.encoder.block.dim = dim;
        c.encoder.block.heads = 4;
        c.encoder.block.ffn_ratio = 2.0;
        c.encoder.block.droppath_rate = 0.0;
        c.encoder.layout = split_layout(4);
        c.tcm.embed_dim = 16;
        c
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            mvp: self.mvp.clone(),
            encoder: self.encoder.clone(),
            tcm: self.use_tcm.then(|| self.tcm.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model().validate()
    }

    pub fn apply_ablation(&mut self, a: Ablation) {
        let base = Self::preset(self.preset);
        let n = self.encoder.total_blocks();
        let hybrid = a != Ablation::A;
        self.encoder.block.kind = if hybrid { BlockKind::ConvText } else { BlockKind::Transformer };
        self.encoder.downsample = hybrid;
        self.encoder.layout = if hybrid { split_layout(n) } else { (n, 0, 0) };
        self.use_tcm = matches!(a, Ablation::C | Ablation::D);
        if a == Ablation::D {
            self.mvp.mv_placement = base.mvp.mv_placement;
            self.mvp.mv_dims = base.mvp.mv_dims;
        } else {
            self.mvp.mv_placement.clear();
            self.mvp.mv_dims.clear();
        }
    }

    /// Sets the encoder depth, keeping the current hierarchy style.
    pub fn set_layers(&mut self, n: usize) {
        self.encoder.layout = if self.encoder.downsample { split_layout(n) } else { (n, 0, 0) };
    }

    /// Parses `preset = ...` plus overrides; `ablation` and `layers` are
    /// applied before the remaining keys.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| HtrError::Config(format!("invalid config: {e}")))?;
        let preset = match table.get("preset") {
            Some(v) => as_str("preset", v)?.parse()?,
            None => Preset::Micro,
        };
        let mut c = Self::preset(preset);
        if let Some(v) = table.get("ablation") {
            c.apply_ablation(as_str("ablation", v)?.parse()?);
        }
        if let Some(v) = table.get("layers") {
            c.set_layers(as_usize("layers", v)?);
        }
        for (k, v) in &table {
            if !matches!(k.as_str(), "preset" | "ablation" | "layers") {
                c.set(k, v)?;
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HtrError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let t = &mut self.train;
        let m = &mut self.mvp;
        let b = &mut self.encoder.block;
        match key {
            "seed" => t.seed = as_usize(key, v)? as u64,
            "max_lr" => t.max_lr = as_f64(key, v)?,
            "warmup_iters" => t.warmup_iters = as_usize(key, v)?,
            "total_iters" => t.total_iters = as_usize(key, v)?,
            "weight_decay" => t.weight_decay = as_f64(key, v)?,
            "ema_decay" => t.ema_decay = as_f64(key, v)?,
            "batch_train" => t.batch_train = as_usize(key, v)?,
            "batch_val" => t.batch_val = as_usize(key, v)?,
            "lambda_ctc" => t.loss.ctc = as_f64(key, v)?,
            "lambda_tcm" => t.loss.tcm = as_f64(key, v)?,
            "select_ema" => t.select_ema = as_bool(key, v)?,
            "augment" => t.augment = as_bool(key, v)?,
            "eval_every" => t.eval_every = as_usize(key, v)?,
            "height" => m.geometry.height = as_usize(key, v)?,
            "width" => m.geometry.width = as_usize(key, v)?,
            "stem_channels" => m.stem_channels = as_usize(key, v)?,
            "stage_channels" => m.stage_channels = as_usize_list(key, v)?,
            "stage_strides" => m.stage_strides = as_pair_list(key, v)?,
            "blocks_per_stage" => m.blocks_per_stage = as_usize(key, v)?,
            "mv_placement" => m.mv_placement = as_usize_list(key, v)?,
            "mv_dims" => m.mv_dims = as_usize_list(key, v)?,
            "mv_depth" => m.mv_depth = as_usize(key, v)?,
            "mv_heads" => m.mv_heads = as_usize(key, v)?,
            "mv_ffn_ratio" => m.mv_ffn_ratio = as_usize(key, v)?,
            "patch" => m.patch = as_pair(key, v)?,
            "pe" => m.pe = as_str(key, v)?.parse()?,
            "dim" => {
                b.dim = as_usize(key, v)?;
                m.token_dim = b.dim;
            }
            "heads" => b.heads = as_usize(key, v)?,
            "ffn_ratio" => b.ffn_ratio = as_f64(key, v)?,
            "conv_kernel" => b.conv_kernel = as_usize(key, v)?,
            "conv_expansion" => b.conv_expansion = as_usize(key, v)?,
            "layerscale_init" => b.layerscale_init = as_f64(key, v)?,
            "droppath" => b.droppath_rate = as_f64(key, v)?,
            "relative" => {
                b.relative = match as_str(key, v)? {
                    "sinusoidal" => RelativePosition::Sinusoidal,
                    "table" => match b.relative {
                        RelativePosition::BiasTable { .. } => b.relative,
                        RelativePosition::Sinusoidal => RelativePosition::BiasTable { max_distance: 32 },
                    },
                    s => return Err(HtrError::Config(format!("unknown relative scheme {s:?}"))),
                }
            }
            "rel_max_distance" => {
                let d = as_usize(key, v)?;
                if d == 0 {
                    return Err(HtrError::Config("rel_max_distance must be positive".into()));
                }
                b.relative = RelativePosition::BiasTable { max_distance: d };
            }
            "block" => {
                b.kind = match as_str(key, v)? {
                    "convtext" => BlockKind::ConvText,
                    "transformer" => BlockKind::Transformer,
                    s => return Err(HtrError::Config(format!("unknown block kind {s:?}"))),
                }
            }
            "downsample" => self.encoder.downsample = as_bool(key, v)?,
            "layout" => {
                let l = as_usize_list(key, v)?;
                let [p, q, r] = l[..] else {
                    return Err(HtrError::Config("layout takes three block counts".into()));
                };
                self.encoder.layout = (p, q, r);
            }
            "tcm" => self.use_tcm = as_bool(key, v)?,
            "tcm_window" => self.tcm.window = as_usize(key, v)?,
            "tcm_embed" => self.tcm.embed_dim = as_usize(key, v)?,
            "tcm_kernel" => self.tcm.window_kernel = as_usize(key, v)?,
            "tcm_heads" => self.tcm.heads = as_usize(key, v)?,
            "tcm_fusion" => {
                self.tcm.fusion = match as_str(key, v)? {
                    "product" => Fusion::QueryProduct,
                    "attended" => Fusion::AttendedOnly,
                    s => return Err(HtrError::Config(format!("unknown fusion {s:?}"))),
                }
            }
            _ => return Err(HtrError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every setting as flat TOML; parsing it back reproduces `self`.
    pub fn to_toml(&self) -> String {
        let t = &self.train;
        let m = &self.mvp;
        let b = &self.encoder.block;
        let list = |v: &[usize]| format!("{v:?}");
        let pairs = |v: &[(usize, usize)]| {
            let items: Vec<String> = v.iter().map(|(a, b)| format!("[{a}, {b}]")).collect();
            format!("[{}]", items.join(", "))
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", format!("\"{}\"", self.preset));
        kv("seed", t.seed.to_string());
        kv("max_lr", fmt_f64(t.max_lr));
        kv("warmup_iters", t.warmup_iters.to_string());
        kv("total_iters", t.total_iters.to_string());
        kv("weight_decay", fmt_f64(t.weight_decay));
        kv("ema_decay", fmt_f64(t.ema_decay));
        kv("batch_train", t.batch_train.to_string());
        kv("batch_val", t.batch_val.to_string());
        kv("lambda_ctc", fmt_f64(t.loss.ctc));
        kv("lambda_tcm", fmt_f64(t.loss.tcm));
        kv("select_ema", t.select_ema.to_string());
        kv("augment", t.augment.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("height", m.geometry.height.to_string());
        kv("width", m.geometry.width.to_string());
        kv("stem_channels", m.stem_channels.to_string());
        kv("stage_channels", list(&m.stage_channels));
        kv("stage_strides", pairs(&m.stage_strides));
        kv("blocks_per_stage", m.blocks_per_stage.to_string());
        kv("mv_placement", list(&m.mv_placement));
        kv("mv_dims", list(&m.mv_dims));
        kv("mv_depth", m.mv_depth.to_string());
        kv("mv_heads", m.mv_heads.to_string());
        kv("mv_ffn_ratio", m.mv_ffn_ratio.to_string());
        kv("patch", format!("[{}, {}]", m.patch.0, m.patch.1));
        kv("pe", format!("\"{}\"", m.pe));
        kv("dim", b.dim.to_string());
        kv("heads", b.heads.to_string());
        kv("ffn_ratio", fmt_f64(b.ffn_ratio));
        kv("conv_kernel", b.conv_kernel.to_string());
        kv("conv_expansion", b.conv_expansion.to_string());
        kv("layerscale_init", fmt_f64(b.layerscale_init));
        kv("droppath", fmt_f64(b.droppath_rate));
        match b.relative {
            RelativePosition::Sinusoidal => kv("relative", "\"sinusoidal\"".into()),
            RelativePosition::BiasTable { max_distance } => {
                kv("relative", "\"table\"".into());
                kv("rel_max_distance", max_distance.to_string());
            }
        }
        let kind = match b.kind {
            BlockKind::ConvText => "convtext",
            BlockKind::Transformer => "transformer",
        };
        kv("block", format!("\"{kind}\""));
        kv("downsample", self.encoder.downsample.to_string());
        let (p, q, r) = self.encoder.layout;
        kv("layout", format!("[{p}, {q}, {r}]"));
        kv("tcm", self.use_tcm.to_string());
        kv("tcm_window", self.tcm.window.to_string());
        kv("tcm_embed", self.tcm.embed_dim.to_string());
        kv("tcm_kernel", self.tcm.window_kernel.to_string());
        kv("tcm_heads", self.tcm.heads.to_string());
        let fusion = match self.tcm.fusion {
            Fusion::QueryProduct => "product",
            Fusion::AttendedOnly => "attended",
        };
        kv("tcm_fusion", format!("\"{fusion}\""));
        s
    }
}

/// Shortest representation that parses back to the same value.
fn fmt_f64(x: f64) -> String {
    let s = format!("{x:?}");
    if s.contains(['.', 'e', 'i', 'N']) {
        s
    } else {
        format!("{s}.0")
    }
}

fn type_error<T>(key: &str, want: &str) -> Result<T> {
    Err(HtrError::Config(format!("{key} must be {want}")))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().map_or_else(|| type_error(key, "a string"), Ok)
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().map_or_else(|| type_error(key, "a boolean"), Ok)
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v.as_integer() {
        Some(i) if i >= 0 => Ok(i as usize),
        _ => type_error(key, "a non-negative integer"),
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => type_error(key, "a number"),
    }
}

fn as_usize_list(key: &str, v: &Value) -> Result<Vec<usize>> {
    match v.as_array() {
        Some(a) => a.iter().map(|x| as_usize(key, x)).collect(),
        None => type_error(key, "an array of integers"),
    }
}

fn as_pair(key: &str, v: &Value) -> Result<(usize, usize)> {
    match as_usize_list(key, v)?[..] {
        [a, b] => Ok((a, b)),
        _ => type_error(key, "a pair of integers"),
    }
}

fn as_pair_list(key: &str, v: &Value) -> Result<Vec<(usize, usize)>> {
    match v.as_array() {
        Some(a) => a.iter().map(|x| as_pair(key, x)).collect(),
        None => type_error(key, "an array of integer pairs"),
    }
}
