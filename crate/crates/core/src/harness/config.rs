use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_dataset, synthetic_scene, LoadMode, Sample};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::OptimizerKind;
use crate::task::default_weights;
use crate::uda::UdaConfig;

/// Where training or evaluation images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// `count` scenes from [`synthetic_scene`] with seeds `seed, seed + 1, ...`.
    Synthetic { seed: u64, count: usize, size: usize },
    /// A directory written by [`crate::data::save_dataset`].
    Disk { root: PathBuf },
}

impl DatasetSpec {
    /// Number of samples, when known without touching the disk.
    pub fn declared_len(&self) -> Option<usize> {
        match self {
            DatasetSpec::Synthetic { count, .. } => Some(*count),
            DatasetSpec::Disk { .. } => None,
        }
    }

    pub fn load(&self, model: &ModelConfig) -> Result<Vec<Sample>> {
        match self {
            DatasetSpec::Synthetic { seed, count, size } => {
                (0..*count as u64).map(|i| synthetic_scene(seed.wrapping_add(i), *size, model.num_classes, model.d_far)).collect()
            }
            DatasetSpec::Disk { root } => load_dataset(root, LoadMode::Strict)?.collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub encoder_lr: f64,
    /// Shared by decoders, exchange blocks and heads.
    pub decoder_lr: f64,
    pub algorithm: OptimizerKind,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { encoder_lr: 2e-4, decoder_lr: 3e-4, algorithm: OptimizerKind::default() }
    }
}

/// Upper bounds that keep a configuration runnable on a desk CPU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    pub max_iterations: usize,
    /// Over source, target and evaluation sets together.
    pub max_samples: usize,
    pub max_image_size: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self { max_iterations: 2000, max_samples: 64, max_image_size: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UdaRun {
    pub config: UdaConfig,
    /// Unlabelled target domain; only images are used.
    pub target: DatasetSpec,
}

fn default_name() -> String {
    "run".into()
}

fn default_batch() -> usize {
    8
}

fn default_decay_factor() -> f64 {
    0.1
}

fn default_clip() -> f64 {
    10.0
}

fn default_bn_momentum() -> f64 {
    0.1
}

fn default_log_every() -> usize {
    50
}

/// One training run. Scalars come first so the TOML form keeps them above
/// the tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Multiplies every learning rate by `lr_decay_factor` each time this
    /// many iterations have passed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_decay_step: Option<usize>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    /// Joint gradient-norm bound; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Per-task loss weights in `model.tasks` order; defaults per task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    /// Defaults to the training set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub budget: Budget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uda: Option<UdaRun>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: default_name(),
            seed: 0,
            iterations: 500,
            batch_size: default_batch(),
            lr_decay_step: None,
            lr_decay_factor: default_decay_factor(),
            grad_clip: default_clip(),
            bn_momentum: default_bn_momentum(),
            checkpoint_every: None,
            log_every: default_log_every(),
            weights: None,
            model: ModelConfig::default(),
            dataset: DatasetSpec::Synthetic { seed: 0, count: 8, size: 64 },
            eval_dataset: None,
            optimizer: OptimizerConfig::default(),
            budget: Budget::default(),
            uda: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn task_weights(&self) -> Vec<f64> {
        self.weights.clone().unwrap_or_else(|| default_weights(&self.model.tasks))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Some(w) = &self.weights {
            if w.len() != self.model.tasks.len() {
                return bad(format!("{} weights for {} tasks", w.len(), self.model.tasks.len()));
            }
            if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return bad(format!("task weights must be finite and non-negative, got {w:?}"));
            }
        }
        if self.lr_decay_step == Some(0) || self.checkpoint_every == Some(0) {
            return bad("lr_decay_step and checkpoint_every must be positive when set".into());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!("lr_decay_factor = {}", self.lr_decay_factor));
        }
        if !(self.grad_clip >= 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("grad_clip must be >= 0 and bn_momentum in [0, 1]".into());
        }
        let o = &self.optimizer;
        if !(o.encoder_lr >= 0.0 && o.decoder_lr >= 0.0) {
            return bad("learning rates must be >= 0".into());
        }
        if let Some(u) = &self.uda {
            u.config.validate()?;
        }
        let b = &self.budget;
        if self.iterations > b.max_iterations {
            return bad(format!("{} iterations exceed the budget of {}", self.iterations, b.max_iterations));
        }
        let sets = [Some(&self.dataset), self.eval_dataset.as_ref(), self.uda.as_ref().map(|u| &u.target)];
        let declared: usize = sets.iter().flatten().filter_map(|d| d.declared_len()).sum();
        if declared > b.max_samples {
            return bad(format!("{declared} samples exceed the budget of {}", b.max_samples));
        }
        for d in sets.iter().flatten() {
            if let DatasetSpec::Synthetic { count, size, .. } = d {
                if *count == 0 || *size > b.max_image_size {
                    return bad(format!("synthetic set of {count} scenes at {size}px is outside the budget"));
                }
            }
        }
        Ok(())
    }

    /// Checks loaded sets against the budget; needed for on-disk data.
    pub(crate) fn check_loaded(&self, sets: &[&[Sample]]) -> Result<()> {
        let total: usize = sets.iter().map(|s| s.len()).sum();
        if total > self.budget.max_samples {
            return Err(Error::Config(format!("{total} samples exceed the budget of {}", self.budget.max_samples)));
        }
        for s in sets.iter().flat_map(|s| s.iter()) {
            if s.height.max(s.width) > self.budget.max_image_size {
                return Err(Error::Config(format!("{}x{} images exceed the budget", s.height, s.width)));
            }
        }
        Ok(())
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Loss-weight vectors for [`super::gridsearch`], one per grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightGrid {
    pub weights: Vec<Vec<f64>>,
}

impl WeightGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
