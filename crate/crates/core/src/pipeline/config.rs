use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainConfig};
use crate::phantom::PhantomConfig;
use crate::schedule::{NoiseSchedule, SamplingPlan};

/// Healthy-cohort training: optimiser settings plus a held-out tail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The last `holdout` healthy subjects are kept out of training and used
    /// for held-out reconstruction and age-prediction metrics.
    pub holdout: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            holdout: 32,
        }
    }
}

impl TrainingSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Timesteps visited by the deterministic sampler.
    pub sampling_steps: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            sampling_steps: 20,
        }
    }
}

impl DiffusionSection {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }

    pub fn plan(&self) -> Result<SamplingPlan> {
        SamplingPlan::evenly_spaced(self.steps, self.sampling_steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringSection {
    /// Reconstruct every patient for the image-space deviation score.
    pub image_mse: bool,
    /// Subjects per inference batch.
    pub batch_size: usize,
    /// Precomputed healthy reference to reuse instead of recomputing it.
    pub reference: Option<PathBuf>,
}

impl Default for ScoringSection {
    fn default() -> Self {
        Self {
            image_mse: true,
            batch_size: 50,
            reference: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurvivalSection {
    /// Score quantiles at which partial-effect survival curves are drawn.
    pub partial_quantiles: Vec<f64>,
    /// Bins per axis for mutual information; 0 picks ⌊√n⌋.
    pub nmi_bins: usize,
    /// Permutations of the latent score used as a negative control.
    pub shuffles: usize,
}

impl Default for SurvivalSection {
    fn default() -> Self {
        Self {
            partial_quantiles: vec![0.1, 0.5, 0.9],
            nmi_bins: 0,
            shuffles: 20,
        }
    }
}

/// Every setting of a pipeline run, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub phantom: PhantomConfig,
    pub model: ModelConfig,
    pub training: TrainingSection,
    /// Optimiser settings for the age-regression baseline.
    pub baseline: TrainConfig,
    pub diffusion: DiffusionSection,
    pub scoring: ScoringSection,
    pub survival: SurvivalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("run"),
            phantom: PhantomConfig::default(),
            model: ModelConfig::default(),
            training: TrainingSection::default(),
            baseline: TrainConfig::default(),
            diffusion: DiffusionSection::default(),
            scoring: ScoringSection::default(),
            survival: SurvivalSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.model.validate()?;
        if self.model.image_size != self.phantom.image_size {
            return Err(Error::Config(format!(
                "model.image_size {} differs from phantom.image_size {}",
                self.model.image_size, self.phantom.image_size
            )));
        }
        self.training.train_config().validate()?;
        if self.training.holdout >= self.phantom.healthy_count {
            return Err(Error::Config(format!(
                "training.holdout {} leaves no healthy subjects to train on",
                self.training.holdout
            )));
        }
        self.baseline.validate()?;
        self.diffusion.schedule()?;
        self.diffusion.plan()?;
        if self.scoring.batch_size == 0 {
            return Err(Error::Config("scoring.batch_size must be positive".into()));
        }
        if let Some(p) = &self.scoring.reference {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "scoring.reference {} does not exist",
                    p.display()
                )));
            }
        }
        if let Some(q) = self.survival.partial_quantiles.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return Err(Error::Config(format!("survival.partial_quantiles entry {q} outside [0, 1]")));
        }
        Ok(())
    }

    /// Digest of the resolved configuration, recorded in every manifest.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        sha256_hex(&bytes)
    }

    /// Independent seed for one pipeline stage, derived from the master seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(stage.as_bytes());
        u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
    }
}
