//! Dataset ingestion, image preparation, augmentation and batching.

pub mod augment;
pub mod manifest;
pub mod raster;
pub mod synth;

use std::path::Path;

use htr_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use augment::{augment, AugmentConfig};
pub use manifest::{load_manifest, LineRecord, Split};
pub use raster::{normalize, Geometry, LineImage};
pub use synth::synth_corpus;

use crate::error::{HtrError, Result};
use crate::vocab::{CharVocab, PAD_ID};

/// A normalized line with its transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: LineImage,
    pub text: String,
}

/// Images stacked as `[B, 1, H, W]` with labels padded by the pad id.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    /// `B` rows of equal width.
    pub labels: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    /// Labels of sample `b` without padding.
    pub fn target(&self, b: usize) -> &[usize] {
        &self.labels[b][..self.lengths[b]]
    }
}

pub fn collate(items: &[(&LineImage, &[usize])]) -> Result<Batch> {
    let Some(first) = items.first() else {
        return Err(HtrError::Data("cannot collate an empty batch".into()));
    };
    let geom = first.0.geometry();
    let width = items.iter().map(|(_, l)| l.len()).max().unwrap_or(0);
    let mut pixels = Vec::with_capacity(items.len() * geom.height * geom.width);
    let mut labels = Vec::with_capacity(items.len());
    let mut lengths = Vec::with_capacity(items.len());
    for (img, lab) in items {
        if img.geometry() != geom {
            return Err(HtrError::Shape(format!(
                "batch mixes image sizes {:?} and {:?}",
                geom,
                img.geometry()
            )));
        }
        pixels.extend_from_slice(img.pixels());
        let mut row = lab.to_vec();
        row.resize(width, PAD_ID);
        labels.push(row);
        lengths.push(lab.len());
    }
    Ok(Batch {
        images: Tensor::new(&[items.len(), 1, geom.height, geom.width], pixels),
        labels,
        lengths,
    })
}

/// Encodes and collates samples, optionally augmenting each image with its own stream.
pub fn make_batch(
    samples: &[&Sample],
    vocab: &CharVocab,
    aug: Option<(&AugmentConfig, &[ChaCha8Rng])>,
) -> Result<Batch> {
    let images: Vec<LineImage> = match aug {
        Some((cfg, rngs)) => samples
            .iter()
            .zip(rngs)
            .map(|(s, r)| augment(&s.image, cfg, &mut r.clone()))
            .collect(),
        None => samples.iter().map(|s| s.image.clone()).collect(),
    };
    let labels = samples
        .iter()
        .map(|s| vocab.encode(&s.text))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<(&LineImage, &[usize])> = images
        .iter()
        .zip(&labels)
        .map(|(i, l)| (i, l.as_slice()))
        .collect();
    collate(&items)
}

/// Per-sample stream, a pure function of (seed, epoch, index).
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

/// Visiting order of `n` samples in one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = sample_rng(seed, epoch, u64::MAX);
    idx.shuffle(&mut rng);
    idx
}

/// Loads and normalizes every record of `split`.
pub fn load_split(
    root: &Path,
    records: &[LineRecord],
    split: Split,
    geom: Geometry,
) -> Result<Vec<Sample>> {
    records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let raw = LineImage::load(&root.join(&r.image_path))?;
            Ok(Sample {
                image: normalize(&raw, geom)?,
                text: r.transcript.clone(),
            })
        })
        .collect()
}
