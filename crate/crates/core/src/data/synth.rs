//! Procedurally rendered text lines for desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::raster::{Geometry, LineImage, BACKGROUND};
use crate::error::{HtrError, Result};
use crate::vocab::CharVocab;
use super::Sample;

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;
pub const MIN_LEN: usize = 3;
pub const MAX_LEN: usize = 12;

/// A 5×7 stroke pattern, row-major.
pub type Glyph = [bool; GLYPH_W * GLYPH_H];

/// Fixed glyph per character. Whitespace renders empty; every other character
/// gets a pattern derived from its code point, re-drawn until it differs from
/// all earlier glyphs of the vocabulary.
pub fn glyphs(vocab: &CharVocab) -> Vec<Glyph> {
    let mut out: Vec<Glyph> = Vec::with_capacity(vocab.chars().len());
    for &c in vocab.chars() {
        if c.is_whitespace() {
            out.push([false; GLYPH_W * GLYPH_H]);
            continue;
        }
        let mut attempt = 0u64;
        let glyph = loop {
            let mut rng = ChaCha8Rng::seed_from_u64(0x6c79_7068 ^ u64::from(c as u32));
            rng.set_stream(attempt);
            let mut g = [false; GLYPH_W * GLYPH_H];
            for cell in &mut g {
                *cell = rng.random_bool(0.45);
            }
            let ink = g.iter().filter(|&&b| b).count();
            if ink >= 8 && !out.contains(&g) {
                break g;
            }
            attempt += 1;
        };
        out.push(glyph);
    }
    out
}

const MAX_SLANT: f64 = 0.25;

/// Pixel size of one glyph cell, left margin and the widest character pitch
/// that still fits twelve slanted characters.
fn layout(geom: Geometry) -> (usize, usize, usize) {
    let cell = (geom.height * 6 / 10 / GLYPH_H)
        .min(geom.width / (MAX_LEN * (GLYPH_W + 1) + 4))
        .max(1);
    let margin = (MAX_SLANT * (GLYPH_H * cell) as f64).ceil() as usize + 1;
    let room = geom.width.saturating_sub(2 * margin + (GLYPH_W + 1) * cell);
    let pitch = (room / (MAX_LEN - 1)).max(cell * (GLYPH_W + 1));
    (cell, margin, pitch)
}

fn render(glyphs: &[Glyph], ids: &[usize], geom: Geometry, rng: &mut ChaCha8Rng) -> LineImage {
    let (cell, margin, pitch) = layout(geom);
    let slant: f64 = rng.random_range(-MAX_SLANT..=MAX_SLANT);
    let thickness = rng.random_range(0..=cell / 2);
    let ink: f64 = rng.random_range(0.0..=0.2);
    let pitch = pitch as f64 * rng.random_range(0.8..=1.0);
    let text_h = GLYPH_H * cell;
    let top = rng.random_range(0..=geom.height.saturating_sub(text_h + thickness)) as f64;
    let baseline = top + text_h as f64;
    let mut img = LineImage::filled(geom.height, geom.width, BACKGROUND);
    for (k, &id) in ids.iter().enumerate() {
        let g = &glyphs[id];
        let x0 = margin as f64 + k as f64 * pitch;
        for gy in 0..GLYPH_H {
            for gx in 0..GLYPH_W {
                if !g[gy * GLYPH_W + gx] {
                    continue;
                }
                let py = top + (gy * cell) as f64;
                let px = x0 + (gx * cell) as f64 + slant * (baseline - py);
                let (px, py) = (px.round() as isize, py as isize);
                for dy in 0..(cell + thickness) as isize {
                    for dx in 0..(cell + thickness) as isize {
                        let (y, x) = (py + dy, px + dx);
                        if y >= 0 && x >= 0 && (y as usize) < geom.height && (x as usize) < geom.width {
                            img.set(y as usize, x as usize, ink);
                        }
                    }
                }
            }
        }
    }
    img
}

/// `n` rendered lines with transcripts of 3 to 12 characters drawn uniformly
/// from the vocabulary. Sample `i` depends only on `(vocab, seed, i)`.
pub fn synth_corpus(
    vocab: &CharVocab,
    n: usize,
    seed: u64,
    geom: Geometry,
) -> Result<Vec<Sample>> {
    if vocab.chars().is_empty() {
        return Err(HtrError::Data("vocabulary has no characters to render".into()));
    }
    if n == 0 {
        return Err(HtrError::Data("synthetic corpus size must be at least 1".into()));
    }
    let glyphs = glyphs(vocab);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let len = rng.random_range(MIN_LEN..=MAX_LEN);
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..glyphs.len())).collect();
        let text: String = ids.iter().map(|&i| vocab.chars()[i]).collect();
        out.push(Sample {
            image: render(&glyphs, &ids, geom, &mut rng),
            text,
        });
    }
    Ok(out)
}
