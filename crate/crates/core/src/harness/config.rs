use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::ScenarioSpec;
use crate::tta::AdaptationConfig;

/// Everything a run needs. Serialized as one flat TOML table; the
/// adaptation keys (`method`, `lambda`, `theta`, ...) sit beside the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Scenario preset used when no dataset files are given.
    pub scenario: String,
    /// Seed of the scenario generator.
    pub scenario_seed: u64,
    /// Optional `MMDS1` files replacing the generated source/target data.
    pub source_data: String,
    pub target_data: String,
    /// Pretrained checkpoint to adapt or evaluate; empty means pretrain
    /// from the source data first.
    pub checkpoint: String,
    /// Fraction of source frames held out (from the end) for source-test.
    pub source_test_fraction: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Frames per pretraining minibatch.
    pub pretrain_batch_frames: usize,
    /// Replace source labels by a random permutation before training.
    pub shuffle_labels: bool,
    /// Methods without a slow model are evaluated with per-frame batch
    /// statistics instead of the statistics frozen at the end of the epoch.
    pub eval_batch_stats: bool,
    /// Multiplier of the learning-rate grid of `sweep-lr`; the first pair
    /// is `(lr_scale, 2.4 * lr_scale)`.
    pub lr_scale: f64,
    #[serde(flatten)]
    pub adapt: AdaptationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: "sensor-swap".into(),
            scenario_seed: 0,
            source_data: String::new(),
            target_data: String::new(),
            checkpoint: String::new(),
            source_test_fraction: 0.2,
            pretrain_epochs: 6,
            pretrain_lr: 1e-3,
            pretrain_batch_frames: 1,
            shuffle_labels: false,
            eval_batch_stats: false,
            lr_scale: crate::harness::sweep::DESK_LR_SCALE,
            adapt: AdaptationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.adapt.validate()?;
        if self.source_data.is_empty() || self.target_data.is_empty() {
            self.scenario_spec()?.validate()?;
        }
        if !(self.source_test_fraction > 0.0 && self.source_test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "source_test_fraction {} outside (0, 1)",
                self.source_test_fraction
            )));
        }
        if !(self.pretrain_lr > 0.0 && self.pretrain_lr.is_finite()) {
            return Err(Error::Config(format!("pretrain_lr {} must be positive", self.pretrain_lr)));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return Err(Error::Config(format!("lr_scale {} must be positive", self.lr_scale)));
        }
        if self.pretrain_batch_frames == 0 {
            return Err(Error::Config("pretrain_batch_frames must be at least 1".into()));
        }
        Ok(())
    }

    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        Ok(ScenarioSpec {
            seed: self.scenario_seed,
            ..ScenarioSpec::preset(&self.scenario)?
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config is not TOML: {e}")))?;
        let known = Self::known_keys();
        if let Some(key) = table.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        let config: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn known_keys() -> Vec<&'static str> {
        vec![
            "scenario",
            "scenario_seed",
            "source_data",
            "target_data",
            "checkpoint",
            "source_test_fraction",
            "pretrain_epochs",
            "pretrain_lr",
            "pretrain_batch_frames",
            "shuffle_labels",
            "eval_batch_stats",
            "lr_scale",
            "method",
            "lambda",
            "theta",
            "lr2d",
            "lr3d",
            "epsilon",
            "batch_size",
            "seed",
            "stats_gradient",
            "score_fused",
        ]
    }

    pub fn source_path(&self) -> Option<PathBuf> {
        (!self.source_data.is_empty()).then(|| PathBuf::from(&self.source_data))
    }

    pub fn target_path(&self) -> Option<PathBuf> {
        (!self.target_data.is_empty()).then(|| PathBuf::from(&self.target_data))
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        (!self.checkpoint.is_empty()).then(|| PathBuf::from(&self.checkpoint))
    }
}
