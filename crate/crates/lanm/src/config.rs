//! Experiment configuration: one strict JSON document describing a whole
//! generate/train/evaluate pipeline.
//!
//! The schema is divided into sections mirroring the library modules —
//! `scm`, `noise`, `mixing`, `model`, `train`, `eval`, plus a `seeds` list
//! for multi-seed runs. Every field has a default, so `{}` is a complete
//! configuration (the standard 3-node chain at 50 segments × 1000 samples).
//! Unknown keys are rejected at every level: a typo fails loudly instead of
//! silently running a different experiment.
//!
//! Commands write the fully resolved configuration (all defaults expanded)
//! next to their outputs, so a run can always be reproduced from its own
//! artifacts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::io;
use crate::model::ModelConfig;
use crate::scm::{GenOptions, ScmSpec, ALPHA_RANGE, BETA_RANGE};
use crate::train::TrainConfig;

fn default_scm() -> ScmSpec {
    ScmSpec::chain(3)
}
fn default_segments() -> usize {
    50
}
fn default_samples() -> usize {
    1000
}
fn default_alpha_range() -> (f64, f64) {
    ALPHA_RANGE
}
fn default_beta_range() -> (f64, f64) {
    BETA_RANGE
}
fn default_true() -> bool {
    true
}
fn default_slope_mixing() -> f64 {
    0.2
}
fn default_hidden() -> usize {
    64
}
fn default_gamma() -> f64 {
    0.01
}
fn default_leaky() -> f64 {
    0.01
}
fn default_sigma_x_sq() -> f64 {
    0.01
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Segment-noise generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// Number of segments M.
    #[serde(default = "default_segments")]
    pub segments: usize,
    #[serde(default = "default_samples")]
    pub samples_per_segment: usize,
    #[serde(default = "default_alpha_range")]
    pub alpha_range: (f64, f64),
    #[serde(default = "default_beta_range")]
    pub beta_range: (f64, f64),
    /// Reserve the last segment with all edge coefficients zeroed, which
    /// certifies the parent-influence condition by construction.
    #[serde(default = "default_true")]
    pub certification_segment: bool,
}

impl Default for NoiseSection {
    fn default() -> NoiseSection {
        NoiseSection {
            segments: default_segments(),
            samples_per_segment: default_samples(),
            alpha_range: default_alpha_range(),
            beta_range: default_beta_range(),
            certification_segment: true,
        }
    }
}

/// Observation-mixing settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingSection {
    /// Observed dimension D; defaults to the latent dimension (square
    /// mixing, no padding).
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default = "default_slope_mixing")]
    pub slope: f64,
    /// Seed for the mixing weights only; defaults to the dataset seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for MixingSection {
    fn default() -> MixingSection {
        MixingSection {
            d: None,
            slope: default_slope_mixing(),
            seed: None,
        }
    }
}

/// Model architecture settings (dimensions come from the data sections).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_leaky")]
    pub leaky_slope: f64,
    #[serde(default = "default_sigma_x_sq")]
    pub sigma_x_sq: f64,
    #[serde(default)]
    pub masks_zero: bool,
}

impl Default for ModelSection {
    fn default() -> ModelSection {
        ModelSection {
            hidden: default_hidden(),
            gamma: default_gamma(),
            leaky_slope: default_leaky(),
            sigma_x_sq: default_sigma_x_sq(),
            masks_zero: false,
        }
    }
}

/// The complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_scm")]
    pub scm: ScmSpec,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub mixing: MixingSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    /// Model-init/training seeds; more than one entry runs each seed in an
    /// isolated subdirectory. The first entry doubles as the dataset seed
    /// for `gen` unless overridden on the command line.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            scm: default_scm(),
            noise: NoiseSection::default(),
            mixing: MixingSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            seeds: default_seeds(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let config: ExperimentConfig = io::read_json(path)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.scm.validate()?;
        if self.noise.segments == 0 || self.noise.samples_per_segment == 0 {
            return Err(Error::Config(
                "noise.segments and noise.samples_per_segment must be >= 1".into(),
            ));
        }
        let d = self.d();
        if d < self.scm.ell {
            return Err(Error::Config(format!(
                "mixing.d = {d} cannot be smaller than the latent dimension {}",
                self.scm.ell
            )));
        }
        if !self.mixing.slope.is_finite() || self.mixing.slope <= 0.0 {
            return Err(Error::Config(format!(
                "mixing.slope {} must be positive (zero would lose invertibility)",
                self.mixing.slope
            )));
        }
        self.model_config(d).validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config(format!(
                "seeds {:?} contain duplicates",
                self.seeds
            )));
        }
        Ok(())
    }

    /// Resolved observed dimension.
    pub fn d(&self) -> usize {
        self.mixing.d.unwrap_or(self.scm.ell)
    }

    /// Generation options for a given dataset seed.
    pub fn gen_options(&self, seed: u64) -> GenOptions {
        GenOptions {
            spec: self.scm.clone(),
            segments: self.noise.segments,
            samples_per_segment: self.noise.samples_per_segment,
            d: self.d(),
            mixing_slope: self.mixing.slope,
            certification_segment: self.noise.certification_segment,
            seed,
            alpha_range: self.noise.alpha_range,
            beta_range: self.noise.beta_range,
            mixing_seed: self.mixing.seed,
        }
    }

    /// Model architecture for an observed dimension (usually [`Self::d`],
    /// but datasets loaded from disk carry their own).
    pub fn model_config(&self, x_dim: usize) -> ModelConfig {
        ModelConfig {
            ell: self.scm.ell,
            x_dim,
            u_dim: self.noise.segments,
            hidden: self.model.hidden,
            gamma: self.model.gamma,
            leaky_slope: self.model.leaky_slope,
            sigma_x_sq: self.model.sigma_x_sq,
            masks_zero: self.model.masks_zero,
        }
    }
}
