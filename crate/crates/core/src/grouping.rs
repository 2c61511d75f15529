//! Random grouping of same-label images into training instances.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::NoisyDataset;
use crate::error::{Error, Result};

pub const MAX_GROUP_SIZE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    /// Drawn from one class of interest.
    Positive,
    /// Drawn from the negative pool.
    Negative,
}

impl Polarity {
    /// `+1` or `-1`.
    pub fn delta(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }
}

/// `member_ids` index into `dataset.train` for positive instances and into
/// `dataset.negatives` for negative ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupedInstance {
    pub member_ids: Vec<usize>,
    pub label: usize,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPlan {
    pub instances: Vec<GroupedInstance>,
    pub seed: u64,
}

impl GroupPlan {
    pub fn positives(&self) -> impl Iterator<Item = &GroupedInstance> {
        self.instances.iter().filter(|i| i.polarity == Polarity::Positive)
    }
}

/// Probability that a group of `k` images holds at least one correctly
/// labelled image when each is mislabelled with probability `xi`.
pub fn group_label_accuracy(xi: f64, k: u32) -> Result<f64> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(Error::Domain(format!("noise level {xi} outside [0, 1]")));
    }
    if k == 0 {
        return Err(Error::Domain("group size must be positive".into()));
    }
    Ok(1.0 - xi.powi(k as i32))
}

/// Empirical counterpart of [`group_label_accuracy`].
pub fn monte_carlo_group_accuracy(xi: f64, k: u32, trials: usize, seed: u64) -> f64 {
    if trials == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let correct = 1.0 - xi.clamp(0.0, 1.0);
    let mut hits = 0usize;
    for _ in 0..trials {
        // Draw every member so the stream does not depend on early exits.
        let mut any = false;
        for _ in 0..k {
            any |= rng.gen_bool(correct);
        }
        hits += usize::from(any);
    }
    hits as f64 / trials as f64
}

/// Partitions each class into shuffled groups of `k` (dropping the
/// remainder), adds `negatives_per_epoch` groups of `k` negative-pool
/// images, and shuffles everything into one epoch order.
pub fn plan_epoch(
    dataset: &NoisyDataset,
    k: usize,
    negatives_per_epoch: usize,
    seed: u64,
) -> Result<GroupPlan> {
    if k == 0 || k > MAX_GROUP_SIZE {
        return Err(Error::Config(format!("group size {k} outside 1..={MAX_GROUP_SIZE}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
    for (idx, img) in dataset.train.iter().enumerate() {
        let bucket = by_class.get_mut(img.given_label).ok_or_else(|| {
            Error::Config(format!(
                "image {} has label {} but there are {} classes",
                img.id, img.given_label, dataset.class_count
            ))
        })?;
        bucket.push(idx);
    }
    for (class, ids) in by_class.iter().enumerate() {
        if ids.len() < k {
            return Err(Error::Config(format!(
                "class {class} has {} images, fewer than group size {k}",
                ids.len()
            )));
        }
    }
    if negatives_per_epoch > 0 && dataset.negatives.len() < k {
        return Err(Error::Config(format!(
            "negative pool has {} images, need at least {k}",
            dataset.negatives.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::new();
    for (class, mut ids) in by_class.into_iter().enumerate() {
        ids.shuffle(&mut rng);
        for chunk in ids.chunks_exact(k) {
            instances.push(GroupedInstance {
                member_ids: chunk.to_vec(),
                label: class,
                polarity: Polarity::Positive,
            });
        }
    }

    let mut pool: Vec<usize> = (0..dataset.negatives.len()).collect();
    let mut cursor = pool.len();
    for _ in 0..negatives_per_epoch {
        if cursor + k > pool.len() {
            pool.shuffle(&mut rng);
            cursor = 0;
        }
        instances.push(GroupedInstance {
            member_ids: pool[cursor..cursor + k].to_vec(),
            label: 0,
            polarity: Polarity::Negative,
        });
        cursor += k;
    }

    instances.shuffle(&mut rng);
    Ok(GroupPlan { instances, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, LabeledImage, SyntheticSpec};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn tiny(sizes: &[usize], negatives: usize) -> NoisyDataset {
        let mut train = Vec::new();
        for (class, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                let id = train.len() as u32;
                train.push(LabeledImage::clean(id, Tensor::zeros(&[1, 1, 1]), class));
            }
        }
        let negatives = (0..negatives)
            .map(|i| LabeledImage {
                id: 1000 + i as u32,
                pixels: Tensor::zeros(&[1, 1, 1]),
                given_label: 0,
                truth: crate::data::Truth::CrossDomain,
                true_label: None,
                signature_box: None,
            })
            .collect();
        NoisyDataset {
            train,
            negatives,
            test: Vec::new(),
            class_count: sizes.len(),
            noise_level: 0.0,
        }
    }

    #[test]
    fn eq1_reference_values() {
        assert!((group_label_accuracy(0.2, 3).unwrap() - 0.992).abs() < 1e-15);
        assert_eq!(group_label_accuracy(0.0, 4).unwrap(), 1.0);
        assert_eq!(group_label_accuracy(0.5, 2).unwrap(), 0.75);
        assert!(group_label_accuracy(1.2, 2).is_err());
        assert!(group_label_accuracy(-0.1, 2).is_err());
    }

    #[test]
    fn monte_carlo_extremes() {
        assert_eq!(monte_carlo_group_accuracy(1.0, 3, 1000, 1), 0.0);
        assert_eq!(monte_carlo_group_accuracy(0.0, 3, 1000, 1), 1.0);
    }

    #[test]
    fn monte_carlo_tracks_closed_form() {
        let trials = 100_000;
        let p = group_label_accuracy(0.2, 3).unwrap();
        let sd = (p * (1.0 - p) / trials as f64).sqrt();
        let est = monte_carlo_group_accuracy(0.2, 3, trials, 7);
        assert!((est - p).abs() <= 3.0 * sd, "{est} vs {p}");
    }

    #[test]
    fn exact_partition() {
        let plan = plan_epoch(&tiny(&[6], 0), 2, 0, 1).unwrap();
        assert_eq!(plan.instances.len(), 3);
        let used: HashSet<usize> = plan.instances.iter().flat_map(|i| i.member_ids.clone()).collect();
        assert_eq!(used.len(), 6);
    }

    #[test]
    fn remainder_is_dropped() {
        let plan = plan_epoch(&tiny(&[7], 0), 3, 0, 1).unwrap();
        assert_eq!(plan.instances.len(), 2);
        let used: usize = plan.instances.iter().map(|i| i.member_ids.len()).sum();
        assert_eq!(used, 6);
    }

    #[test]
    fn small_class_is_named() {
        let err = plan_epoch(&tiny(&[5, 2], 0), 3, 0, 0).unwrap_err().to_string();
        assert!(err.contains("class 1"), "{err}");
    }

    #[test]
    fn group_size_bounds() {
        assert!(plan_epoch(&tiny(&[10], 0), 0, 0, 0).is_err());
        assert!(plan_epoch(&tiny(&[10], 0), 6, 0, 0).is_err());
    }

    #[test]
    fn negatives_cycle_through_the_pool() {
        let plan = plan_epoch(&tiny(&[4, 4], 5), 2, 6, 3).unwrap();
        let neg: Vec<&GroupedInstance> = plan
            .instances
            .iter()
            .filter(|i| i.polarity == Polarity::Negative)
            .collect();
        assert_eq!(neg.len(), 6);
        assert!(neg.iter().all(|i| i.member_ids.len() == 2 && i.member_ids[0] != i.member_ids[1]));
    }

    #[test]
    fn replay_and_seed_dependence() {
        let ds = gen_synthetic(&SyntheticSpec::new(3, 20, 12, 0.3, 2)).unwrap();
        let a = plan_epoch(&ds, 2, 4, 10).unwrap();
        assert_eq!(a, plan_epoch(&ds, 2, 4, 10).unwrap());
        assert_ne!(a.instances, plan_epoch(&ds, 2, 4, 11).unwrap().instances);
    }

    proptest! {
        #[test]
        fn accuracy_increases_with_group_size(xi in 0.05f64..0.99, k in 1u32..6) {
            prop_assert!(group_label_accuracy(xi, k + 1).unwrap() > group_label_accuracy(xi, k).unwrap());
        }

        #[test]
        fn plans_are_label_pure_and_non_repeating(
            sizes in prop::collection::vec(5usize..15, 2..5),
            k in 1usize..=5,
            seed in any::<u64>(),
        ) {
            let ds = tiny(&sizes, 6);
            let plan = plan_epoch(&ds, k, 3, seed).unwrap();
            let mut seen = HashSet::new();
            for inst in plan.positives() {
                prop_assert_eq!(inst.member_ids.len(), k);
                for &m in &inst.member_ids {
                    prop_assert_eq!(ds.train[m].given_label, inst.label);
                    prop_assert!(seen.insert(m));
                }
            }
        }
    }
}
