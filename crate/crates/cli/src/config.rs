use std::path::Path;

use serde::{Deserialize, Serialize};

use equidiff_core::backbone::ModelConfig;
use equidiff_core::data::{SceneConfig, SynthConfig};
use equidiff_core::diffusion::{make_schedule, AdamConfig, DiffusionSchedule};
use equidiff_core::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 5e-2,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    /// Use `min(decay, (1 + n)/(10 + n))` after `n` updates so the shadow
    /// is not dominated by the initialization in short runs.
    pub ema_warmup: bool,
    pub batch: usize,
    pub steps: usize,
    pub log_every: usize,
    /// Training scenes used for the fixed-noise loss probe.
    pub probe_scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.999,
            ema_warmup: true,
            batch: 32,
            steps: 2000,
            log_every: 50,
            probe_scenes: 128,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_frac: 0.75 }
    }
}

/// Every hyperparameter of a run. Serialized into checkpoints and reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub scenes: SceneConfig,
    pub synth: SynthConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Canonical JSON form, the one hashed into checkpoints.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scenes.validate()?;
        self.diffusion.schedule()?;
        if self.model.t_his != self.scenes.t_his || self.model.t_pre != self.scenes.t_pre {
            return Err(Error::Config(format!(
                "model windows ({}, {}) differ from scene windows ({}, {})",
                self.model.t_his, self.model.t_pre, self.scenes.t_his, self.scenes.t_pre
            )));
        }
        let t = &self.train;
        if t.batch == 0 || t.log_every == 0 || !(0.0..1.0).contains(&t.ema_decay) || !(t.lr > 0.0) {
            return Err(Error::Config(format!("invalid training settings: {t:?}")));
        }
        if !(self.data.train_frac > 0.0 && self.data.train_frac < 1.0) {
            return Err(Error::Config(format!("train_frac {} not in (0, 1)", self.data.train_frac)));
        }
        Ok(())
    }
}
