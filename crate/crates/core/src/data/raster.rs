//! Grayscale line images and resizing to the model geometry.

use std::path::Path;

use crate::error::{HtrError, Result};

/// Background (white) luminance used for padding.
pub const BACKGROUND: f64 = 1.0;

/// Target image size fed to the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub const REFERENCE: Geometry = Geometry {
        height: 64,
        width: 512,
    };
}

/// Row-major luminance grid with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct LineImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl LineImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(HtrError::Data(format!("image has zero dimension {height}x{width}")));
        }
        if pixels.len() != height * width {
            return Err(HtrError::Shape(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(HtrError::Data("image contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            height: self.height,
            width: self.width,
        }
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// Bilinear sample at a fractional position; outside the image reads background.
    pub fn sample(&self, y: f64, x: f64) -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let at = |yy: f64, xx: f64| -> f64 {
            if yy < 0.0 || xx < 0.0 || yy >= self.height as f64 || xx >= self.width as f64 {
                BACKGROUND
            } else {
                self.get(yy as usize, xx as usize)
            }
        };
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
        let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn clamp_unit(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    /// Reads any PNG (grayscale or colour, 8 or 16 bit) as luminance in [0, 1].
    pub fn load(path: &Path) -> Result<Self> {
        let img = ::image::open(path).map_err(|e| match e {
            ::image::ImageError::IoError(io) => HtrError::io(path, io),
            other => HtrError::Image {
                path: path.to_path_buf(),
                msg: other.to_string(),
            },
        })?;
        let luma = img.to_luma16();
        let (w, h) = luma.dimensions();
        let pixels = luma
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / f64::from(u16::MAX))
            .collect();
        Self::new(h as usize, w as usize, pixels).map_err(|e| HtrError::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Writes an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ::image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches dimensions")
            .save(path)
            .map_err(|e| HtrError::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })
    }
}

/// Box-filter weights mapping `src` samples onto `dst` samples.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * ratio, (o + 1) as f64 * ratio);
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, overlap / ratio));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

/// Area-averaging resize.
pub fn resize(img: &LineImage, height: usize, width: usize) -> LineImage {
    if height == img.height && width == img.width {
        return img.clone();
    }
    let wy = area_weights(img.height, height);
    let wx = area_weights(img.width, width);
    let mut rows = vec![0.0; height * img.width];
    for (o, taps) in wy.iter().enumerate() {
        for &(i, w) in taps {
            let src = &img.pixels[i * img.width..(i + 1) * img.width];
            for (d, s) in rows[o * img.width..(o + 1) * img.width].iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        let row = &rows[y * img.width..(y + 1) * img.width];
        for (x, taps) in wx.iter().enumerate() {
            out[y * width + x] = taps.iter().map(|&(i, w)| w * row[i]).sum();
        }
    }
    let mut out = LineImage {
        height,
        width,
        pixels: out,
    };
    out.clamp_unit();
    out
}

/// Scales to the target height keeping aspect ratio, then right-pads with
/// background or centre-crops to the target width.
pub fn normalize(raw: &LineImage, geom: Geometry) -> Result<LineImage> {
    if raw.height == 0 || raw.width == 0 {
        return Err(HtrError::Data("cannot normalize an empty image".into()));
    }
    let scaled_w = ((raw.width as f64 * geom.height as f64 / raw.height as f64).round() as usize).max(1);
    let scaled = resize(raw, geom.height, scaled_w);
    if scaled_w == geom.width {
        return Ok(scaled);
    }
    let mut out = LineImage::filled(geom.height, geom.width, BACKGROUND);
    let (src_x0, dst_x0, n) = if scaled_w < geom.width {
        (0, 0, scaled_w)
    } else {
        ((scaled_w - geom.width) / 2, 0, geom.width)
    };
    for y in 0..geom.height {
        let s = &scaled.pixels[y * scaled_w + src_x0..y * scaled_w + src_x0 + n];
        out.pixels[y * geom.width + dst_x0..y * geom.width + dst_x0 + n].copy_from_slice(s);
    }
    Ok(out)
}
