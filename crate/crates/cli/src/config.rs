//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use agrp::data::{gen_synthetic, inject_noise, load_idx, read_dataset, NoisyDataset, SyntheticSpec};
use agrp::model::ExtractorSpec;
use agrp::trainer::{instances_per_batch, TrainConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

/// Clean IDX images plus a distractor pool, corrupted at `noise_level`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub distractor_images: PathBuf,
    pub distractor_labels: PathBuf,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default)]
    pub noise_level: f64,
    #[serde(default)]
    pub seed: u64,
}

impl IdxSource {
    pub fn load(&self, noise_level: f64, seed: u64) -> CliResult<NoisyDataset> {
        let clean = load_idx(&self.images, &self.labels)?;
        let distractors = load_idx(&self.distractor_images, &self.distractor_labels)?;
        let mut ds = inject_noise(&clean, noise_level, &distractors, seed)?;
        match (&self.test_images, &self.test_labels) {
            (Some(i), Some(l)) => ds.test = load_idx(i, l)?,
            (None, None) => {}
            _ => return Err(CliError::config("test_images and test_labels go together")),
        }
        ds.validate()?;
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// A dataset directory written by `gen-data`.
    Directory(PathBuf),
    Idx(IdxSource),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

impl DataSource {
    pub fn load(&self) -> CliResult<NoisyDataset> {
        match self {
            DataSource::Synthetic(spec) => Ok(gen_synthetic(spec)?),
            DataSource::Directory(dir) => Ok(read_dataset(dir)?),
            DataSource::Idx(src) => src.load(src.noise_level, src.seed),
        }
    }

    /// Dataset of one sweep cell: the source corrupted at `noise_level`,
    /// with the cell seed added to the source seed.
    pub fn load_cell(&self, noise_level: f64, seed: u64) -> CliResult<NoisyDataset> {
        match self {
            DataSource::Synthetic(spec) => {
                let spec = SyntheticSpec {
                    noise_level,
                    seed: spec.seed.wrapping_add(seed),
                    ..spec.clone()
                };
                Ok(gen_synthetic(&spec)?)
            }
            DataSource::Idx(src) => src.load(noise_level, src.seed.wrapping_add(seed)),
            DataSource::Directory(_) => Err(CliError::config(
                "a sweep varies the noise level; use a synthetic or idx dataset",
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub group_sizes: Vec<usize>,
    pub noise_levels: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Variant of cells with group size ≥ 2. Cells at group size 1 use
    /// AP_AT.
    pub variant: Variant,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self {
            group_sizes: vec![1, 2, 3, 4],
            noise_levels: vec![0.2, 0.4, 0.6],
            seeds: (0..5).collect(),
            variant: Variant::RgtAtR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DataSource,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    /// When set, overrides `train.batch_instances` with the instance count
    /// holding this many images per update.
    pub batch_images: Option<usize>,
    pub sweep: SweepAxes,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DataSource::default(),
            output_dir: PathBuf::from("agrp-out"),
            train: TrainConfig::default(),
            batch_images: None,
            sweep: SweepAxes::default(),
        }
    }
}

impl ExperimentConfig {
    /// The benchmark used to compare variants: five classes of 200 images
    /// on a 14-pixel canvas, one conv block, twelve images per update.
    pub fn benchmark() -> Self {
        Self {
            dataset: DataSource::Synthetic(SyntheticSpec::new(5, 200, 14, 0.4, 1000)),
            output_dir: PathBuf::from("agrp-out"),
            train: TrainConfig {
                lr0: 0.7,
                extractor: ExtractorSpec::Conv { channels: vec![16] },
                ..TrainConfig::default()
            },
            batch_images: Some(12),
            sweep: SweepAxes {
                noise_levels: vec![0.2, 0.6],
                ..SweepAxes::default()
            },
        }
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.batch_images == Some(0) {
            return Err(CliError::config("batch_images must be ≥ 1"));
        }
        if let DataSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
        }
        self.resolved_train().validate()?;
        let s = &self.sweep;
        if let Some(&k) = s.group_sizes.iter().find(|&&k| k == 0) {
            return Err(CliError::config(format!("sweep group size {k} must be ≥ 1")));
        }
        if let Some(x) = s.noise_levels.iter().find(|x| !(0.0..1.0).contains(*x)) {
            return Err(CliError::config(format!("sweep noise level {x} is outside [0, 1)")));
        }
        if !s.variant.grouping() {
            return Err(CliError::config(format!(
                "sweep variant {} does not group; pick RGT, RGT_AT or RGT_AT_R",
                s.variant
            )));
        }
        Ok(())
    }

    fn with_batch(&self, mut c: TrainConfig) -> TrainConfig {
        if let Some(images) = self.batch_images {
            c.batch_instances = instances_per_batch(images, c.group_size);
        }
        c.resolved()
    }

    /// Training settings of the `train` command.
    pub fn resolved_train(&self) -> TrainConfig {
        self.with_batch(self.train.clone())
    }

    /// Training settings of a run of `variant` at group size `k`. Variants
    /// that do not group are forced to `k = 1`.
    pub fn run_config(&self, variant: Variant, k: usize, seed: u64) -> TrainConfig {
        let negatives = if self.train.negatives_per_epoch == 0 {
            TrainConfig::default().negatives_per_epoch
        } else {
            self.train.negatives_per_epoch
        };
        self.with_batch(TrainConfig {
            variant,
            group_size: if variant.grouping() { k } else { 1 },
            negatives_per_epoch: negatives,
            seed,
            ..self.train.clone()
        })
    }

    /// Variant trained in a sweep cell of group size `k`.
    pub fn cell_variant(&self, k: usize) -> Variant {
        if k == 1 {
            Variant::ApAt
        } else {
            self.sweep.variant
        }
    }

    /// The config with every default filled in and the effective training
    /// settings written back, as echoed next to run outputs.
    pub fn resolved(&self) -> Self {
        Self {
            train: self.resolved_train(),
            batch_images: self.batch_images,
            ..self.clone()
        }
    }

    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> CliResult<PathBuf> {
        let path = dir.as_ref().join(RESOLVED_CONFIG);
        let mut text = serde_json::to_string_pretty(&self.resolved())?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}
