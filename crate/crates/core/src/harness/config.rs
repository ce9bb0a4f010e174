use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consolidation::ConsolidationConfig;
use crate::data::SynthParams;
use crate::error::{Error, Result};
use crate::inference::InterpolationWeights;
use crate::ltm::LtmConfig;
use crate::stm::StmConfig;

/// The documented default configuration; parsing it yields
/// `ExperimentConfig::default()`.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../configs/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub scae_batch_size: usize,
    pub scae_learning_rate: f64,
    pub scae_max_steps: usize,
    /// Steps per window of the plateau test.
    pub scae_plateau_window: usize,
    /// Stop when a window's mean loss improves on the previous window by less
    /// than this fraction.
    pub scae_plateau_tolerance: f64,
    /// Fraction of base images held out for the reconstruction check.
    pub scae_holdout_fraction: f64,
    pub classifier_learning_rate: f64,
    pub classifier_epochs: usize,
    pub classifier_batch_size: usize,
    /// Epochs of full-data training for the no-one-shot upper bound.
    pub upper_bound_epochs: usize,
    /// Classifier steps on the support set (one exemplar per class) before
    /// testing, the slow learner's only exposure to the novel class. 0 keeps
    /// the classifier frozen during study.
    pub ltm_support_steps: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            scae_batch_size: 20,
            scae_learning_rate: 0.5,
            scae_max_steps: 300,
            scae_plateau_window: 50,
            scae_plateau_tolerance: 0.01,
            scae_holdout_fraction: 0.1,
            classifier_learning_rate: 0.5,
            classifier_epochs: 30,
            classifier_batch_size: 20,
            upper_bound_epochs: 10,
            ltm_support_steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub background_classes: usize,
    pub evaluation_classes: usize,
    pub exemplars_per_class: usize,
    pub glyphs: SynthParams,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 2019,
            background_classes: 30,
            evaluation_classes: 45,
            exemplars_per_class: 20,
            glyphs: SynthParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub split_seed: u64,
    pub eval_classes: usize,
    pub novel_classes: usize,
    /// Exemplars per evaluation class kept out of classifier training and used
    /// for support/target sampling.
    pub reserved_exemplars: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            split_seed: 7,
            eval_classes: 19,
            novel_classes: 20,
            reserved_exemplars: 4,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub runs: usize,
    pub seeds: Vec<u64>,
    /// Carry the consolidated LTM from one run into the next within a seed.
    pub accumulate_across_runs: bool,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub ltm: LtmConfig,
    pub stm: StmConfig,
    pub consolidation: ConsolidationConfig,
    pub interpolation: InterpolationWeights,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            runs: 20,
            seeds: (0..10).collect(),
            accumulate_across_runs: false,
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            ltm: LtmConfig::default(),
            stm: StmConfig::default(),
            consolidation: ConsolidationConfig::default(),
            interpolation: InterpolationWeights::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.ltm.validate()?;
        self.stm.validate()?;
        self.consolidation.validate()?;
        self.interpolation.validate()?;
        if self.ltm.num_classes != self.data.eval_classes + 1 {
            return Err(Error::Config(format!(
                "classifier vocabulary {} must be eval classes {} plus one novel slot",
                self.ltm.num_classes, self.data.eval_classes
            )));
        }
        if self.runs > self.data.novel_classes {
            return Err(Error::Config(format!(
                "{} runs need at least as many novel classes, have {}",
                self.runs, self.data.novel_classes
            )));
        }
        if self.stm.capacity < self.ltm.num_classes {
            return Err(Error::Config(
                "STM capacity smaller than the support set".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let p = &self.pretrain;
        if p.scae_batch_size == 0 || p.classifier_batch_size == 0 || p.scae_plateau_window == 0 {
            return Err(Error::Config(
                "batch sizes and plateau window must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&p.scae_holdout_fraction) {
            return Err(Error::Config(
                "scae_holdout_fraction must lie in [0, 1)".into(),
            ));
        }
        if self.ltm.image_size != self.data.synthetic.glyphs.image_size {
            return Err(Error::Config(
                "synthetic glyph size differs from LTM image size".into(),
            ));
        }
        Ok(())
    }

    /// Consolidation rate, defaulting to the classifier pre-training rate.
    pub fn consolidation_learning_rate(&self) -> f64 {
        self.consolidation
            .learning_rate
            .unwrap_or(self.pretrain.classifier_learning_rate)
    }
}
