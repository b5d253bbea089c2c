//! Training-time image augmentation.

use rand::Rng;

use super::raster::LineImage;
use crate::error::{HtrError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Independent chance of applying each transform.
    pub apply_probability: f64,
    /// Largest dilation/erosion window side, at most 2.
    pub morph_kernel_max: usize,
    /// Brightness shift and contrast change are drawn from ±this.
    pub jitter_range: f64,
    /// Maximum control-point displacement of the elastic warp, in pixels.
    pub elastic_strength: f64,
    pub max_rotation_deg: f64,
    pub max_shear: f64,
    pub max_scale_delta: f64,
    pub max_translate_px: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            apply_probability: 0.5,
            morph_kernel_max: 2,
            jitter_range: 0.2,
            elastic_strength: 1.5,
            max_rotation_deg: 1.5,
            max_shear: 0.15,
            max_scale_delta: 0.05,
            max_translate_px: 3.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            apply_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(HtrError::Config("augment probability must lie in [0, 1]".into()));
        }
        if self.morph_kernel_max > 2 {
            return Err(HtrError::Config("morphology kernel is limited to 2".into()));
        }
        let ranges = [
            self.jitter_range,
            self.elastic_strength,
            self.max_rotation_deg,
            self.max_shear,
            self.max_scale_delta,
            self.max_translate_px,
        ];
        if ranges.iter().any(|r| !r.is_finite() || *r < 0.0) || self.max_scale_delta >= 1.0 {
            return Err(HtrError::Config("augment ranges must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Window offsets for a k-wide structuring element.
fn offsets(k: usize) -> std::ops::RangeInclusive<isize> {
    let k = k as isize;
    -(k / 2)..=(k - 1 - k / 2)
}

fn morph(img: &LineImage, k: usize, pick: fn(f64, f64) -> f64, init: f64) -> LineImage {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = init;
            for dy in offsets(k) {
                for dx in offsets(k) {
                    let (yy, xx) = (y + dy, x + dx);
                    if (0..h).contains(&yy) && (0..w).contains(&xx) {
                        acc = pick(acc, img.get(yy as usize, xx as usize));
                    }
                }
            }
            out.set(y as usize, x as usize, acc);
        }
    }
    out
}

/// Grayscale dilation (windowed maximum) with a k×k square.
pub fn dilate(img: &LineImage, k: usize) -> LineImage {
    morph(img, k, f64::max, f64::NEG_INFINITY)
}

/// Grayscale erosion (windowed minimum) with a k×k square.
pub fn erode(img: &LineImage, k: usize) -> LineImage {
    morph(img, k, f64::min, f64::INFINITY)
}

fn jitter(img: &mut LineImage, range: f64, rng: &mut impl Rng) {
    let contrast = 1.0 + rng.random_range(-range..=range);
    let brightness = rng.random_range(-range..=range);
    for p in img.pixels_mut() {
        *p = (*p - 0.5) * contrast + 0.5 + brightness;
    }
}

const ELASTIC_GRID: (usize, usize) = (4, 32);

fn elastic(img: &LineImage, strength: f64, rng: &mut impl Rng) -> LineImage {
    let (gh, gw) = ELASTIC_GRID;
    let mut field = vec![(0.0, 0.0); gh * gw];
    for f in &mut field {
        *f = (
            rng.random_range(-strength..=strength),
            rng.random_range(-strength..=strength),
        );
    }
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for y in 0..h {
        let gy = y as f64 * (gh - 1) as f64 / (h.max(2) - 1) as f64;
        let (y0, fy) = (gy.floor() as usize, gy.fract());
        let y1 = (y0 + 1).min(gh - 1);
        for x in 0..w {
            let gx = x as f64 * (gw - 1) as f64 / (w.max(2) - 1) as f64;
            let (x0, fx) = (gx.floor() as usize, gx.fract());
            let x1 = (x0 + 1).min(gw - 1);
            let lerp = |sel: fn(&(f64, f64)) -> f64| {
                let top = sel(&field[y0 * gw + x0]) * (1.0 - fx) + sel(&field[y0 * gw + x1]) * fx;
                let bot = sel(&field[y1 * gw + x0]) * (1.0 - fx) + sel(&field[y1 * gw + x1]) * fx;
                top * (1.0 - fy) + bot * fy
            };
            let (dy, dx) = (lerp(|f| f.0), lerp(|f| f.1));
            out.set(y, x, img.sample(y as f64 + dy, x as f64 + dx));
        }
    }
    out
}

fn affine(img: &LineImage, cfg: &AugmentConfig, rng: &mut impl Rng) -> LineImage {
    let theta = rng
        .random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
        .to_radians();
    let shear = rng.random_range(-cfg.max_shear..=cfg.max_shear);
    let scale = 1.0 + rng.random_range(-cfg.max_scale_delta..=cfg.max_scale_delta);
    let ty = rng.random_range(-cfg.max_translate_px..=cfg.max_translate_px);
    let tx = rng.random_range(-cfg.max_translate_px..=cfg.max_translate_px);
    // forward map: p' = R·S·Sh·(p − c) + c + t; sample the inverse
    let (c, s) = (theta.cos(), theta.sin());
    let (a, b, cc, d) = (c * scale, (c * shear - s) * scale, s * scale, (s * shear + c) * scale);
    let det = a * d - b * cc;
    let (ia, ib, ic, id) = (d / det, -b / det, -cc / det, a / det);
    let (cy, cx) = ((img.height() as f64 - 1.0) / 2.0, (img.width() as f64 - 1.0) / 2.0);
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (u, v) = (x as f64 - cx - tx, y as f64 - cy - ty);
            let sx = ia * u + ib * v + cx;
            let sy = ic * u + id * v + cy;
            out.set(y, x, img.sample(sy, sx));
        }
    }
    out
}

/// Applies each transform independently with the configured probability and
/// clamps the result to [0, 1]. With probability 0 the input is returned as is.
pub fn augment(img: &LineImage, cfg: &AugmentConfig, rng: &mut impl Rng) -> LineImage {
    let p = cfg.apply_probability;
    let mut out = img.clone();
    let mut touched = false;
    if p > 0.0 && cfg.morph_kernel_max >= 2 && rng.random_bool(p) {
        let k = rng.random_range(2..=cfg.morph_kernel_max);
        out = if rng.random_bool(0.5) { dilate(&out, k) } else { erode(&out, k) };
        touched = true;
    }
    if p > 0.0 && rng.random_bool(p) {
        jitter(&mut out, cfg.jitter_range, rng);
        touched = true;
    }
    if p > 0.0 && rng.random_bool(p) {
        out = elastic(&out, cfg.elastic_strength, rng);
        touched = true;
    }
    if p > 0.0 && rng.random_bool(p) {
        out = affine(&out, cfg, rng);
        touched = true;
    }
    if touched {
        out.clamp_unit();
    }
    out
}
