//! Run configuration: one serializable struct covering model, schedule,
//! optimizer, data, sampler, training, and evaluation settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use mogen_core::error::{CoreError, Result};
use mogen_core::metrics::ExtractorConfig;
use mogen_core::model::ModelConfig;
use mogen_core::schema::DatasetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_start: 2e-4,
            lr_end: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub dataset_size: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub shape: DatasetConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset_size: 512,
            seed: 2024,
            shape: DatasetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub steps: u64,
    pub mask_prob: f64,
    pub seed: u64,
    /// Checkpoint cadence in steps; the final step always checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 2000,
            mask_prob: 0.1,
            seed: 7,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub steps: usize,
    pub guidance_weight: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            steps: 50,
            guidance_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Generated corpus size for FID / R-Precision / Diversity.
    pub samples: usize,
    pub diversity_subset: usize,
    pub multimodality_subset: usize,
    pub multimodality_groups: usize,
    /// Metric repetitions for the confidence intervals.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            samples: 256,
            diversity_subset: 32,
            multimodality_subset: 8,
            multimodality_groups: 16,
            repeats: 20,
            seed: 99,
        }
    }
}

/// The complete run configuration; serialized verbatim into every run
/// directory so results are reproducible from the file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub sampler: SamplerSettings,
    pub training: TrainingConfig,
    pub eval: EvalSettings,
    pub extractor: ExtractorConfig,
}

impl RunConfig {
    /// Desk-scale preset: small widths and short synthetic sequences so a
    /// full train + eval cycle finishes in minutes on a laptop CPU.
    pub fn desk() -> Self {
        let mut cfg = RunConfig::default();
        cfg.model.layers = 2;
        cfg.model.feature_dim = 112;
        cfg.model.time_embed_dim = 32;
        cfg.model.attention.latent_per_group = 16;
        cfg.model.attention.templates_per_group = 12;
        cfg.model.attention.sigma = 0.3;
        cfg.model.attention.text_width = 32;
        cfg.model.text.width = 32;
        cfg.data.shape.feature_dim = 112;
        cfg.data.shape.min_stage_frames = 24;
        cfg.data.shape.max_stage_frames = 36;
        cfg.data.shape.max_stages = 3;
        cfg.optimizer.batch_size = 12;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.schedule.steps < 2 {
            return Err(CoreError::contract("schedule.steps must be at least 2"));
        }
        if !(0.0 < self.schedule.beta_start
            && self.schedule.beta_start <= self.schedule.beta_end
            && self.schedule.beta_end < 1.0)
        {
            return Err(CoreError::contract(
                "schedule.beta_start/beta_end must satisfy 0 < start <= end < 1",
            ));
        }
        if self.optimizer.lr_start <= 0.0 || self.optimizer.lr_end <= 0.0 {
            return Err(CoreError::contract("optimizer.lr_start/lr_end must be positive"));
        }
        if self.optimizer.batch_size == 0 {
            return Err(CoreError::contract("optimizer.batch_size must be positive"));
        }
        if self.data.dataset_size == 0 {
            return Err(CoreError::contract("data.dataset_size must be positive"));
        }
        if self.data.shape.feature_dim != self.model.feature_dim {
            return Err(CoreError::contract(format!(
                "data.feature_dim {} must match model.feature_dim {}",
                self.data.shape.feature_dim, self.model.feature_dim
            )));
        }
        if self.data.shape.min_stage_frames == 0
            || self.data.shape.min_stage_frames > self.data.shape.max_stage_frames
        {
            return Err(CoreError::contract(
                "data.min_stage_frames/max_stage_frames out of order",
            ));
        }
        if self.data.shape.max_stages == 0 {
            return Err(CoreError::contract("data.max_stages must be positive"));
        }
        if !(0.0..=1.0).contains(&self.training.mask_prob) {
            return Err(CoreError::contract("training.mask_prob must lie in [0, 1]"));
        }
        if self.training.steps == 0 {
            return Err(CoreError::contract("training.steps must be positive"));
        }
        if self.sampler.steps == 0 {
            return Err(CoreError::contract("sampler.steps must be positive"));
        }
        if self.eval.repeats == 0 || self.eval.samples == 0 {
            return Err(CoreError::contract("eval.repeats and eval.samples must be positive"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CoreError::contract(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn zero_sigma_names_the_field() {
        let mut cfg = RunConfig::desk();
        cfg.model.attention.sigma = 0.0;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("sigma"), "{err}");
    }

    #[test]
    fn json_roundtrip() {
        let cfg = RunConfig::desk();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn mismatched_feature_dims_rejected() {
        let mut cfg = RunConfig::desk();
        cfg.data.shape.feature_dim = 224;
        assert!(cfg.validate().is_err());
    }
}
