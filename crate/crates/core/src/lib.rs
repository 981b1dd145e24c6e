//! Two-stage dermoscopic lesion segmentation harness.
//!
//! The crate covers everything around the networks of a detect-then-segment
//! pipeline: image primitives, 8-channel colour preprocessing, training
//! augmentation, test-time-augmentation ensembling, challenge scoring and a
//! file-based inference protocol that external detector/segmenter processes
//! speak. Reference baseline backends make the whole pipeline runnable without
//! trained weights.

pub mod augment;
pub mod backend;
pub mod colorspace;
pub mod ensemble;
pub mod error;
pub mod imagecore;
pub mod metrics;
pub mod pipeline;
pub mod synthetic;

pub use error::{Error, Result};
