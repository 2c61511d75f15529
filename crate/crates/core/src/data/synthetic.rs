//! Signature-patch benchmark with known label noise.
//!
//! Every class owns a fixed 3×3 patch. A correctly labelled image is i.i.d.
//! uniform background with its class patch stamped at a random position.
//! Cross-category noise stamps another class's patch but keeps the given
//! label; cross-domain noise is background only.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_noise_level, noisy_count, LabeledImage, NoisyDataset, SignatureBox, Truth};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIGNATURE_SIDE: usize = 3;
const MIN_SIGNATURE_DISTANCE: f64 = 0.5;
const MAX_SIGNATURE_DRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_side: usize,
    pub channels: usize,
    pub noise_level: f64,
    pub seed: u64,
    /// Size of the negative pool; `None` means `per_class`.
    pub negatives: Option<usize>,
    /// Clean test images per class; `None` means `per_class / 2`.
    pub test_per_class: Option<usize>,
    /// Background pixels are uniform on this interval.
    pub background: [f64; 2],
    /// Each signature pixel is one of these two levels.
    pub signature_levels: [f64; 2],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            per_class: 200,
            image_side: 14,
            channels: 1,
            noise_level: 0.4,
            seed: 0,
            negatives: None,
            test_per_class: None,
            background: [0.0, 0.6],
            signature_levels: [0.0, 1.0],
        }
    }
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, image_side: usize, noise_level: f64, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            image_side,
            noise_level,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_noise_level(self.noise_level)?;
        if self.classes < 2 {
            return Err(Error::Domain(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.image_side < 12 {
            return Err(Error::Domain(format!(
                "image side must be at least 12, got {}",
                self.image_side
            )));
        }
        if self.per_class == 0 || self.channels == 0 {
            return Err(Error::Domain("per_class and channels must be positive".into()));
        }
        let [lo, hi] = self.background;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Domain(format!("background range {lo}..{hi} not within [0, 1]")));
        }
        if self.signature_levels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("signature levels must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

struct Canvas<'a> {
    spec: &'a SyntheticSpec,
    signatures: Vec<Vec<f64>>,
}

impl Canvas<'_> {
    fn background(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = self.spec;
        let [lo, hi] = s.background;
        (0..s.image_side * s.image_side * s.channels)
            .map(|_| if hi > lo { rng.gen_range(lo..hi) } else { lo })
            .collect()
    }

    fn stamped(&self, class: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, SignatureBox) {
        let s = self.spec;
        let mut px = self.background(rng);
        let row = rng.gen_range(0..=s.image_side - SIGNATURE_SIDE);
        let col = rng.gen_range(0..=s.image_side - SIGNATURE_SIDE);
        let sig = &self.signatures[class];
        for dy in 0..SIGNATURE_SIDE {
            for dx in 0..SIGNATURE_SIDE {
                let dst = ((row + dy) * s.image_side + col + dx) * s.channels;
                let src = (dy * SIGNATURE_SIDE + dx) * s.channels;
                px[dst..dst + s.channels].copy_from_slice(&sig[src..src + s.channels]);
            }
        }
        (
            px,
            SignatureBox {
                row,
                col,
                size: SIGNATURE_SIDE,
            },
        )
    }

    fn tensor(&self, px: Vec<f64>) -> Result<Tensor> {
        let s = self.spec;
        Tensor::new(vec![s.image_side, s.image_side, s.channels], px)
    }
}

fn draw_signatures(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let len = SIGNATURE_SIDE * SIGNATURE_SIDE * spec.channels;
    let [lo, hi] = spec.signature_levels;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    let mut draws = 0;
    while out.len() < spec.classes {
        if draws == MAX_SIGNATURE_DRAWS {
            return Err(Error::Generation(format!(
                "could not find {} signatures {MIN_SIGNATURE_DISTANCE} apart in {MAX_SIGNATURE_DRAWS} draws",
                spec.classes
            )));
        }
        draws += 1;
        let cand: Vec<f64> = (0..len).map(|_| if rng.gen_bool(0.5) { hi } else { lo }).collect();
        let far = out.iter().all(|o| {
            o.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                >= MIN_SIGNATURE_DISTANCE
        });
        if far {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Class signatures a spec produces, each `3 * 3 * channels` values.
pub fn signatures(spec: &SyntheticSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    draw_signatures(spec, &mut rng)
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<NoisyDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let canvas = Canvas {
        spec,
        signatures: draw_signatures(spec, &mut rng)?,
    };
    let c = spec.classes;
    let n = spec.per_class;

    // Spread the corrupted images evenly over classes, then split each
    // class's share 1:1 between the two noise kinds.
    let total_noisy = noisy_count(spec.noise_level, c * n);
    let mut next_id = 0u32;
    let mut train = Vec::with_capacity(c * n);
    for class in 0..c {
        let share = total_noisy / c + usize::from(class < total_noisy % c);
        let cross_category = share / 2;
        let mut kinds = vec![Truth::Correct; n];
        for (i, k) in kinds.iter_mut().take(share).enumerate() {
            *k = if i < cross_category {
                Truth::CrossCategory
            } else {
                Truth::CrossDomain
            };
        }
        kinds.shuffle(&mut rng);
        for truth in kinds {
            let img = match truth {
                Truth::Correct => {
                    let (px, bx) = canvas.stamped(class, &mut rng);
                    LabeledImage {
                        id: next_id,
                        pixels: canvas.tensor(px)?,
                        given_label: class,
                        truth,
                        true_label: Some(class),
                        signature_box: Some(bx),
                    }
                }
                Truth::CrossCategory => {
                    let other = (class + rng.gen_range(1..c)) % c;
                    let (px, bx) = canvas.stamped(other, &mut rng);
                    LabeledImage {
                        id: next_id,
                        pixels: canvas.tensor(px)?,
                        given_label: class,
                        truth,
                        true_label: Some(other),
                        signature_box: Some(bx),
                    }
                }
                Truth::CrossDomain => LabeledImage {
                    id: next_id,
                    pixels: canvas.tensor(canvas.background(&mut rng))?,
                    given_label: class,
                    truth,
                    true_label: None,
                    signature_box: None,
                },
            };
            train.push(img);
            next_id += 1;
        }
    }

    let mut negatives = Vec::new();
    for _ in 0..spec.negatives.unwrap_or(n) {
        negatives.push(LabeledImage {
            id: next_id,
            pixels: canvas.tensor(canvas.background(&mut rng))?,
            given_label: 0,
            truth: Truth::CrossDomain,
            true_label: None,
            signature_box: None,
        });
        next_id += 1;
    }

    let mut test = Vec::new();
    for class in 0..c {
        for _ in 0..spec.test_per_class.unwrap_or(n / 2) {
            let (px, bx) = canvas.stamped(class, &mut rng);
            let mut img = LabeledImage::clean(next_id, canvas.tensor(px)?, class);
            img.signature_box = Some(bx);
            test.push(img);
            next_id += 1;
        }
    }

    let ds = NoisyDataset {
        train,
        negatives,
        test,
        class_count: c,
        noise_level: spec.noise_level,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(ds: &NoisyDataset, class: usize, t: Truth) -> usize {
        ds.train
            .iter()
            .filter(|i| i.given_label == class && i.truth == t)
            .count()
    }

    #[test]
    fn clean_when_noise_is_zero() {
        let ds = gen_synthetic(&SyntheticSpec::new(3, 20, 12, 0.0, 1)).unwrap();
        assert!(ds.train.iter().all(|i| i.truth == Truth::Correct));
        assert_eq!(ds.test.len(), 30);
        assert_eq!(ds.negatives.len(), 20);
    }

    #[test]
    fn one_to_one_split_per_class() {
        let ds = gen_synthetic(&SyntheticSpec::new(5, 200, 16, 0.4, 3)).unwrap();
        for class in 0..5 {
            assert_eq!(count(&ds, class, Truth::Correct), 120);
            assert_eq!(count(&ds, class, Truth::CrossCategory), 40);
            assert_eq!(count(&ds, class, Truth::CrossDomain), 40);
        }
        assert!((ds.noisy_fraction() - 0.4).abs() <= 1.0 / ds.train.len() as f64);
    }

    #[test]
    fn noisy_fraction_within_one_image() {
        for &(c, n, xi) in &[(3, 7, 0.33), (4, 11, 0.5), (2, 13, 0.21)] {
            let ds = gen_synthetic(&SyntheticSpec::new(c, n, 12, xi, 9)).unwrap();
            assert!((ds.noisy_fraction() - xi).abs() <= 1.0 / ds.train.len() as f64);
        }
    }

    #[test]
    fn replay_is_identical() {
        let spec = SyntheticSpec::new(3, 10, 12, 0.3, 17);
        assert_eq!(gen_synthetic(&spec).unwrap(), gen_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 18, ..spec.clone() };
        assert_ne!(gen_synthetic(&spec).unwrap(), gen_synthetic(&other).unwrap());
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(matches!(
            gen_synthetic(&SyntheticSpec::new(3, 10, 12, 1.0, 0)),
            Err(Error::Domain(_))
        ));
        assert!(gen_synthetic(&SyntheticSpec::new(1, 10, 12, 0.1, 0)).is_err());
        assert!(gen_synthetic(&SyntheticSpec::new(3, 10, 8, 0.1, 0)).is_err());
    }

    #[test]
    fn too_many_classes_for_distinct_signatures() {
        // One channel with identical levels admits only one signature.
        let spec = SyntheticSpec {
            signature_levels: [0.5, 0.5],
            ..SyntheticSpec::new(2, 4, 12, 0.0, 0)
        };
        assert!(matches!(gen_synthetic(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn signature_box_holds_the_only_fixed_structure() {
        // Across images of one class, pixels aligned to the signature box are
        // identical while background pixels vary like U(0, 0.6).
        let ds = gen_synthetic(&SyntheticSpec::new(2, 50, 14, 0.0, 4)).unwrap();
        let side = 14;
        let mut inside: Vec<Vec<f64>> = vec![Vec::new(); 9];
        let mut outside = Vec::new();
        for img in ds.train.iter().filter(|i| i.given_label == 0) {
            let b = img.signature_box.unwrap();
            for r in 0..side {
                for c in 0..side {
                    let v = img.pixels.data()[r * side + c];
                    if (b.row..b.row + 3).contains(&r) && (b.col..b.col + 3).contains(&c) {
                        inside[(r - b.row) * 3 + c - b.col].push(v);
                    } else {
                        outside.push(v);
                    }
                }
            }
        }
        let var = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
        };
        for cell in &inside {
            assert_eq!(var(cell), 0.0);
        }
        assert!((var(&outside) - 0.36 / 12.0).abs() < 0.005);
    }

    #[test]
    fn signatures_are_separated() {
        let spec = SyntheticSpec::new(8, 2, 12, 0.0, 21);
        let sigs = signatures(&spec).unwrap();
        for i in 0..sigs.len() {
            for j in 0..i {
                let d: f64 = sigs[i].iter().zip(&sigs[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d.sqrt() >= 0.5);
            }
        }
    }
}
