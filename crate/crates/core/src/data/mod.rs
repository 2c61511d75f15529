//! Labelled image sets with ground-truth noise flags.

mod idx;
mod noise;
mod store;
mod synthetic;

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IdxImages};
pub use noise::inject_noise;
pub use store::{read_dataset, read_tensor_file, write_dataset, write_tensor_file, Manifest};
pub use synthetic::{gen_synthetic, signatures, SyntheticSpec, SIGNATURE_SIDE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    Correct,
    CrossDomain,
    CrossCategory,
}

impl Truth {
    pub fn as_str(self) -> &'static str {
        match self {
            Truth::Correct => "correct",
            Truth::CrossDomain => "cross_domain",
            Truth::CrossCategory => "cross_category",
        }
    }
}

/// Pixel rectangle `[row, row + size) × [col, col + size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureBox {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: u32,
    /// `[h, w, c]` with values in `[0, 1]`.
    pub pixels: Tensor,
    pub given_label: usize,
    pub truth: Truth,
    pub true_label: Option<usize>,
    pub signature_box: Option<SignatureBox>,
}

impl LabeledImage {
    pub fn clean(id: u32, pixels: Tensor, label: usize) -> Self {
        Self {
            id,
            pixels,
            given_label: label,
            truth: Truth::Correct,
            true_label: Some(label),
            signature_box: None,
        }
    }

    /// Checks the truth-flag invariants against `class_count`.
    pub fn validate(&self, class_count: usize) -> Result<()> {
        let ok = match self.truth {
            Truth::Correct => self.true_label == Some(self.given_label),
            Truth::CrossCategory => matches!(
                self.true_label,
                Some(t) if t != self.given_label && t < class_count
            ),
            Truth::CrossDomain => self.true_label.is_none(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Consistency(format!(
                "image {}: truth {:?} inconsistent with given {} / true {:?}",
                self.id, self.truth, self.given_label, self.true_label
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    pub train: Vec<LabeledImage>,
    /// Background images from no class; used only by the regulariser.
    pub negatives: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub class_count: usize,
    pub noise_level: f64,
}

impl NoisyDataset {
    /// `(side, channels)` shared by every image in the dataset.
    pub fn image_dims(&self) -> Result<(usize, usize)> {
        let first = self
            .train
            .first()
            .or(self.test.first())
            .ok_or_else(|| Error::Consistency("dataset has no images".into()))?;
        let (h, w, c) = first.pixels.hwc("dataset")?;
        if h != w {
            return Err(Error::dim("dataset", format!("images are {h}×{w}, expected square")));
        }
        for img in self.train.iter().chain(&self.negatives).chain(&self.test) {
            if img.pixels.shape() != [h, w, c] {
                return Err(Error::Consistency(format!(
                    "image {} has shape {:?}, expected [{h}, {w}, {c}]",
                    img.id,
                    img.pixels.shape()
                )));
            }
        }
        Ok((h, c))
    }

    /// Number of train images carrying each given label.
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.class_count];
        for img in &self.train {
            if img.given_label < self.class_count {
                n[img.given_label] += 1;
            }
        }
        n
    }

    pub fn noisy_fraction(&self) -> f64 {
        if self.train.is_empty() {
            return 0.0;
        }
        let bad = self.train.iter().filter(|i| i.truth != Truth::Correct).count();
        bad as f64 / self.train.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        for img in &self.train {
            img.validate(self.class_count)?;
        }
        for img in &self.test {
            if img.truth != Truth::Correct {
                return Err(Error::Consistency(format!("test image {} is not clean", img.id)));
            }
            img.validate(self.class_count)?;
        }
        for img in &self.negatives {
            if img.truth != Truth::CrossDomain {
                return Err(Error::Consistency(format!(
                    "negative image {} must be cross-domain",
                    img.id
                )));
            }
        }
        Ok(())
    }
}

/// Number of corrupted images for noise level `xi` over `n` images.
pub(crate) fn noisy_count(xi: f64, n: usize) -> usize {
    ((xi * n as f64) + 1e-9).floor() as usize
}

pub(crate) fn check_noise_level(xi: f64) -> Result<()> {
    if !(0.0..1.0).contains(&xi) {
        return Err(Error::Domain(format!("noise level must lie in [0, 1), got {xi}")));
    }
    Ok(())
}
