//! End-to-end SGD over grouped instances for the six ablation variants.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::NoisyDataset;
use crate::error::{Error, Result};
use crate::grouping::{plan_epoch, Polarity, MAX_GROUP_SIZE};
use crate::losses::{attention_hinge, softmax_cross_entropy};
use crate::model::{ExtractorSpec, ModelGrads, ModelState};
use crate::tensor::Tensor;

/// Which of grouping, attention and the hinge regulariser are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "AP")]
    Ap,
    #[serde(rename = "RGT")]
    Rgt,
    #[serde(rename = "AP_AT")]
    ApAt,
    #[serde(rename = "RGT_AT")]
    RgtAt,
    #[serde(rename = "AP_AT_R")]
    ApAtR,
    #[serde(rename = "RGT_AT_R")]
    RgtAtR,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Ap,
        Variant::Rgt,
        Variant::ApAt,
        Variant::RgtAt,
        Variant::ApAtR,
        Variant::RgtAtR,
    ];

    pub fn grouping(self) -> bool {
        matches!(self, Variant::Rgt | Variant::RgtAt | Variant::RgtAtR)
    }

    pub fn attention(self) -> bool {
        !matches!(self, Variant::Ap | Variant::Rgt)
    }

    pub fn regularizer(self) -> bool {
        matches!(self, Variant::ApAtR | Variant::RgtAtR)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ap => "AP",
            Variant::Rgt => "RGT",
            Variant::ApAt => "AP_AT",
            Variant::RgtAt => "RGT_AT",
            Variant::ApAtR => "AP_AT_R",
            Variant::RgtAtR => "RGT_AT_R",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub group_size: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub lr0: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub epochs: usize,
    pub batch_instances: usize,
    /// Negative instances mixed into each epoch (regularised variants only).
    pub negatives_per_epoch: usize,
    pub seed: u64,
    pub extractor: ExtractorSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::RgtAtR,
            group_size: 2,
            lambda: 0.1,
            epsilon: 0.1,
            lr0: 0.001,
            lr_drop_epoch: 5,
            lr_drop_factor: 0.1,
            epochs: 15,
            batch_instances: 16,
            negatives_per_epoch: 50,
            seed: 0,
            extractor: ExtractorSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Copy with the settings a variant ignores normalised away.
    pub fn resolved(&self) -> TrainConfig {
        let mut c = self.clone();
        if !c.variant.regularizer() {
            c.negatives_per_epoch = 0;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.variant;
        if !v.grouping() && self.group_size != 1 {
            return Err(Error::Config(format!("{v} trains on single images; group_size must be 1")));
        }
        if v.grouping() && !(2..=MAX_GROUP_SIZE).contains(&self.group_size) {
            return Err(Error::Config(format!(
                "{v} needs group_size in 2..={MAX_GROUP_SIZE}, got {}",
                self.group_size
            )));
        }
        if !v.regularizer() && self.negatives_per_epoch != 0 {
            return Err(Error::Config(format!("{v} has no regulariser; negatives_per_epoch must be 0")));
        }
        if !(self.lambda >= 0.0) || !(self.epsilon >= 0.0) {
            return Err(Error::Config("lambda and epsilon must be ≥ 0".into()));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.lr_drop_epoch == 0 || !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(Error::Config("lr_drop_epoch must be ≥ 1 and lr_drop_factor in (0, 1]".into()));
        }
        if self.batch_instances == 0 {
            return Err(Error::Config("batch_instances must be ≥ 1".into()));
        }
        self.extractor.validate()
    }

    /// `lr0 · factor^⌊epoch / drop_epoch⌋`
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_drop_factor.powi((epoch / self.lr_drop_epoch) as i32)
    }

    /// Seed of the grouping plan for `epoch`.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        splitmix64(self.seed ^ splitmix64(epoch as u64 ^ 0xA076_1D64_78BD_642F))
    }
}

/// Instances per update that keep about `images` images in every batch
/// whatever the group size.
pub fn instances_per_batch(images: usize, group_size: usize) -> usize {
    (images / group_size.max(1)).max(1)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean classification loss over positive instances.
    pub l_class: f64,
    /// Mean hinge term over all instances (0 without the regulariser).
    pub r_term: f64,
    /// Mean of `l_class + lambda * r` over all instances.
    pub total: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

pub fn init_model(config: &TrainConfig, dataset: &NoisyDataset) -> Result<ModelState> {
    let (side, channels) = dataset.image_dims()?;
    ModelState::init(&config.resolved(), dataset.class_count, side, channels, config.seed)
}

fn check_dataset(dataset: &NoisyDataset, k: usize) -> Result<()> {
    if dataset.class_count < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 classes, dataset has {}",
            dataset.class_count
        )));
    }
    for (class, n) in dataset.class_sizes().into_iter().enumerate() {
        if n < k {
            return Err(Error::Config(format!("class {class} has {n} images, fewer than group size {k}")));
        }
    }
    Ok(())
}

pub fn train_epoch(model: &mut ModelState, dataset: &NoisyDataset, epoch: usize) -> Result<EpochRecord> {
    model.config.validate()?;
    check_dataset(dataset, model.config.group_size)?;
    run_epoch(model, dataset, epoch)
}

pub(crate) fn run_epoch(model: &mut ModelState, dataset: &NoisyDataset, epoch: usize) -> Result<EpochRecord> {
    let start = Instant::now();
    let cfg = model.config.clone();
    let lr = cfg.learning_rate(epoch);
    let plan = plan_epoch(dataset, cfg.group_size, cfg.negatives_per_epoch, cfg.epoch_seed(epoch))?;
    let regularize = cfg.variant.regularizer();

    let mut sum_class = 0.0;
    let mut n_pos = 0usize;
    let mut sum_r = 0.0;
    let mut sum_total = 0.0;

    for (batch_idx, batch) in plan.instances.chunks(cfg.batch_instances).enumerate() {
        let scale = 1.0 / batch.len() as f64;
        let mut grads = ModelGrads::zeros_like(model);
        for (j, inst) in batch.iter().enumerate() {
            let instance = batch_idx * cfg.batch_instances + j;
            let diverged = |detail: String| Error::Divergence {
                epoch,
                instance,
                detail,
            };
            let pool = match inst.polarity {
                Polarity::Positive => &dataset.train,
                Polarity::Negative => &dataset.negatives,
            };
            let images: Vec<&Tensor> = inst.member_ids.iter().map(|&m| &pool[m].pixels).collect();
            let fwd = model.forward_group(&images)?;

            let mut grad_logits = None;
            let mut l_class = 0.0;
            if inst.polarity == Polarity::Positive {
                let logits = model.logits(&fwd.pooled)?;
                let (loss, mut g) = softmax_cross_entropy(logits.data(), inst.label)
                    .map_err(|e| diverged(e.to_string()))?;
                for v in &mut g {
                    *v *= scale;
                }
                l_class = loss;
                grad_logits = Some(g);
                sum_class += loss;
                n_pos += 1;
            }

            let mut grad_scores = None;
            let mut r = 0.0;
            if regularize {
                let trace = fwd
                    .trace
                    .as_ref()
                    .ok_or_else(|| Error::State("regularised variant without attention trace".into()))?;
                let (hinge, mut gu) = attention_hinge(&trace.linear_scores, inst.polarity.delta());
                gu.scale(cfg.lambda * scale);
                r = hinge;
                grad_scores = Some(gu);
            }

            let total = l_class + cfg.lambda * r;
            if !total.is_finite() {
                return Err(diverged(format!("non-finite loss {total}")));
            }
            sum_r += r;
            sum_total += total;
            model.backward_group(&fwd, grad_logits.as_deref(), grad_scores.as_ref(), &mut grads)?;
        }
        model.apply(&grads, lr)?;
        if !model.is_finite() {
            return Err(Error::Divergence {
                epoch,
                instance: batch_idx * cfg.batch_instances + batch.len() - 1,
                detail: "parameters became non-finite".into(),
            });
        }
    }

    let n = plan.instances.len().max(1) as f64;
    Ok(EpochRecord {
        epoch,
        l_class: if n_pos > 0 { sum_class / n_pos as f64 } else { 0.0 },
        r_term: sum_r / n,
        total: sum_total / n,
        lr,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn train(config: &TrainConfig, dataset: &NoisyDataset) -> Result<(ModelState, TrainHistory)> {
    let config = config.resolved();
    config.validate()?;
    check_dataset(dataset, config.group_size)?;
    let mut model = init_model(&config, dataset)?;
    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        history.epochs.push(run_epoch(&mut model, dataset, epoch)?);
    }
    Ok((model, history))
}
