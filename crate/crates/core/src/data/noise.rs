use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_noise_level, noisy_count, LabeledImage, NoisyDataset, Truth};
use crate::error::{Error, Result};

/// Corrupts `⌊xi·n⌋` uniformly chosen images of a clean set, half by
/// relabelling to a different class (cross-category) and half by swapping
/// the pixels for a distractor image while keeping the label
/// (cross-domain).
///
/// The distractor set doubles as the negative pool. The returned dataset
/// has an empty test split.
pub fn inject_noise(
    clean: &[LabeledImage],
    xi: f64,
    distractors: &[LabeledImage],
    seed: u64,
) -> Result<NoisyDataset> {
    check_noise_level(xi)?;
    if clean.is_empty() {
        return Err(Error::Config("clean set is empty".into()));
    }
    let class_count = clean.iter().map(|i| i.given_label).max().unwrap_or(0) + 1;
    if class_count < 2 {
        return Err(Error::Config("clean set needs at least 2 classes".into()));
    }
    for img in clean {
        if img.truth != Truth::Correct {
            return Err(Error::Config(format!("image {} in the clean set is not clean", img.id)));
        }
    }
    if let Some(d) = distractors
        .iter()
        .find(|d| d.true_label.is_some_and(|l| l < class_count && clean.iter().any(|c| c.given_label == l)))
    {
        return Err(Error::Config(format!(
            "distractor {} carries label {:?}, which is one of the clean classes",
            d.id, d.true_label
        )));
    }
    let n_noisy = noisy_count(xi, clean.len());
    if n_noisy > 0 && distractors.is_empty() {
        return Err(Error::Config("noise requested but the distractor pool is empty".into()));
    }
    let shape = clean[0].pixels.shape();
    if let Some(d) = distractors.iter().find(|d| d.pixels.shape() != shape) {
        return Err(Error::Config(format!(
            "distractor {} has shape {:?}, clean images are {shape:?}",
            d.id,
            d.pixels.shape()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..clean.len()).collect();
    order.shuffle(&mut rng);
    let cross_category = n_noisy / 2;

    let mut train = clean.to_vec();
    for (rank, &idx) in order.iter().take(n_noisy).enumerate() {
        let img = &mut train[idx];
        let original = img.given_label;
        if rank < cross_category {
            img.given_label = (original + rng.gen_range(1..class_count)) % class_count;
            img.truth = Truth::CrossCategory;
            img.true_label = Some(original);
        } else {
            let d = &distractors[rng.gen_range(0..distractors.len())];
            img.pixels = d.pixels.clone();
            img.truth = Truth::CrossDomain;
            img.true_label = None;
            img.signature_box = None;
        }
    }

    let negatives = distractors
        .iter()
        .map(|d| LabeledImage {
            id: d.id,
            pixels: d.pixels.clone(),
            given_label: 0,
            truth: Truth::CrossDomain,
            true_label: None,
            signature_box: None,
        })
        .collect();

    let ds = NoisyDataset {
        train,
        negatives,
        test: Vec::new(),
        class_count,
        noise_level: xi,
    };
    ds.validate()?;
    Ok(ds)
}
