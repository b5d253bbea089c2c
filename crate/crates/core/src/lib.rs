//! Line-level handwritten text recognition: convolutional/MobileViT feature
//! extractor, hierarchical ConvText encoder, CTC head and a training-only
//! textual context module.

pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod data;
pub mod encoder;
pub mod error;
pub mod inspect;
pub mod metrics;
pub mod model;
pub mod mvp;
pub mod nn;
pub mod tcm;
pub mod train;
pub mod vocab;

pub use error::{CheckpointErrorKind, HtrError, Result};
pub use vocab::CharVocab;
