//! Encoder attention inspection for a single line image.

use std::fmt::Write as _;
use std::path::Path;

use htr_autograd::Tensor;

use crate::data::LineImage;
use crate::error::{HtrError, Result};
use crate::model::HtrModel;
use crate::nn::{Ctx, ParamStore};

/// Per-head attention rows of `token` in encoder block `layer` (execution
/// order) for a `[1, 1, H, W]` image, `heads × L`.
pub fn attention_rows(
    model: &HtrModel,
    params: &ParamStore,
    image: &Tensor,
    token: usize,
    layer: usize,
) -> Result<Vec<Vec<f64>>> {
    if image.shape().first() != Some(&1) {
        return Err(HtrError::Shape(format!("expected a single image, got {:?}", image.shape())));
    }
    let mut ctx = Ctx::eval(params);
    ctx.capture_attention();
    let im = ctx.g.constant(image.clone());
    model.encode(&mut ctx, im)?;
    let maps = ctx.attention_maps();
    let Some(map) = maps.get(layer) else {
        return Err(HtrError::Data(format!("layer {layer} out of range (encoder has {} blocks)", maps.len())));
    };
    let s = map.shape();
    let (heads, l) = (s[1], s[2]);
    if token >= l {
        return Err(HtrError::Data(format!("token {token} out of range (layer {layer} has {l} tokens)")));
    }
    Ok((0..heads)
        .map(|h| {
            let start = (h * l + token) * l;
            map.data()[start..start + l].to_vec()
        })
        .collect())
}

/// Head-averaged attention row.
pub fn inspect_attention(
    model: &HtrModel,
    params: &ParamStore,
    image: &Tensor,
    token: usize,
    layer: usize,
) -> Result<Vec<f64>> {
    let rows = attention_rows(model, params, image, token, layer)?;
    let n = rows.len() as f64;
    Ok((0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect())
}

pub fn attention_csv(row: &[f64]) -> String {
    let mut s = String::from("position,weight\n");
    for (i, w) in row.iter().enumerate() {
        let _ = writeln!(s, "{i},{w}");
    }
    s
}

/// `1 × L` grayscale strip, brightest at the largest weight.
pub fn attention_heatmap(row: &[f64]) -> Result<LineImage> {
    let max = row.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    LineImage::new(1, row.len(), row.iter().map(|w| w * scale).collect())
}

/// Writes `<out>.csv` and `<out>.png`.
pub fn write_attention(row: &[f64], out: &Path) -> Result<()> {
    let csv = out.with_extension("csv");
    std::fs::write(&csv, attention_csv(row)).map_err(|e| HtrError::io(&csv, e))?;
    attention_heatmap(row)?.save_png(&out.with_extension("png"))
}
