//! Samples, manifests, mask decoding, augmentation and synthetic tampering.

pub mod augment;
pub mod io;
pub mod manifest;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{Mask, Tensor};

pub use augment::{augment, AugmentationPolicy};
pub use io::{decode_mask, load_image, save_gray_png, save_mask_png, save_rgb_png};
pub use manifest::{load_manifest, DatasetManifest, ManifestEntry};
pub use synth::{generate_dataset, synthesize_tamper, synthetic_base, Rect, SynthOptions, TamperKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Authentic,
    Manipulated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// RGB image in `[0, 1]` with its binary ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Mask,
    pub source_id: String,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Mask, source_id: impl Into<String>) -> Result<Self> {
        let (c, h, w) = image.dims3()?;
        let (mc, mh, mw) = mask.dims3()?;
        if c != 3 || mc != 1 || (h, w) != (mh, mw) {
            return Err(shape_err!(
                "sample image {:?} and mask {:?} disagree",
                image.shape(),
                mask.shape()
            ));
        }
        Ok(Sample {
            image,
            mask,
            source_id: source_id.into(),
        })
    }

    /// Image with an all-false mask.
    pub fn authentic(image: Tensor<f32>, source_id: impl Into<String>) -> Result<Self> {
        let (_, h, w) = image.dims3()?;
        Sample::new(image, Tensor::full(&[1, h, w], false), source_id)
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Fraction of manipulated pixels.
    pub fn prevalence(&self) -> f64 {
        self.mask.count_true() as f64 / self.mask.len().max(1) as f64
    }
}
