use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::dataset::{self, Dataset, SynthConfig, SynthKind};
use crate::error::{Error, Result};
use crate::tensor::AdamConfig;

/// Where training images come from. Image size follows the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        kind: SynthKind,
        #[serde(default = "default_count")]
        count: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_jitter")]
        jitter: f64,
    },
    Folder {
        path: PathBuf,
    },
}

fn default_count() -> usize {
    512
}

fn default_jitter() -> f64 {
    0.05
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic { kind: SynthKind::MirroredBlobs, count: default_count(), seed: 0, jitter: default_jitter() }
    }
}

impl DataConfig {
    pub fn load(&self, size: usize) -> Result<Dataset> {
        match self {
            DataConfig::Synthetic { kind, count, seed, jitter } => {
                dataset::synth_dataset(&SynthConfig { kind: *kind, count: *count, size, seed: *seed, jitter: *jitter })
            }
            DataConfig::Folder { path } => dataset::load_folder(path, size),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: usize,
    pub adam_g: AdamConfig,
    pub adam_d: AdamConfig,
    pub seed: u64,
    /// Weight of the mirror-pair loss; 0 disables it.
    pub alpha_sym: f64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 64,
            steps: 2000,
            adam_g: AdamConfig::default(),
            adam_d: AdamConfig::default(),
            seed: 0,
            alpha_sym: 0.0,
            eval_every: 100,
            checkpoint_every: 0,
            data: DataConfig::default(),
        }
    }
}

pub const ALPHA_SOFT: f64 = 40.0;
pub const ALPHA_STRONG: f64 = 100.0;

impl TrainConfig {
    pub fn paired(&self) -> bool {
        self.alpha_sym > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_sym >= 0.0) || !self.alpha_sym.is_finite() {
            return Err(Error::Config(format!("alpha_sym must be a finite value >= 0, got {}", self.alpha_sym)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.paired() && self.batch % 2 != 0 {
            return Err(Error::Config(format!(
                "batch {} must be even when the mirror-pair loss is on (z and z_N halves)",
                self.batch
            )));
        }
        for a in [&self.adam_g, &self.adam_d] {
            if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
                return Err(Error::Config(format!("invalid Adam settings {a:?}")));
            }
        }
        Ok(())
    }
}

/// Inversion and fine-tuning settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitTuneConfig {
    /// Weight decay on z.
    pub alpha_wd: f64,
    /// Weight of the hinge that keeps |z_i| <= 1.
    pub beta: f64,
    pub fit_iters: usize,
    pub z_lr: f64,
    /// Alternations of adversarial and reconstruction steps.
    pub rounds: usize,
    pub gan_steps: usize,
    pub joint_steps: usize,
    /// Learning rate for generator parameters in the joint steps.
    pub tune_lr: f64,
    /// Joint steps over which the generator learning rate ramps up.
    pub warmup: usize,
    /// Generator learning rate of the adversarial steps while tuning.
    pub gan_lr: f64,
    /// Batch for the adversarial steps while tuning.
    pub gan_batch: usize,
}

impl Default for FitTuneConfig {
    fn default() -> Self {
        FitTuneConfig {
            alpha_wd: 1e-3,
            beta: 1.0,
            fit_iters: 2000,
            z_lr: 0.02,
            rounds: 10,
            gan_steps: 10,
            joint_steps: 2000,
            tune_lr: 2e-3,
            warmup: 500,
            gan_lr: 2e-5,
            gan_batch: 16,
        }
    }
}

impl FitTuneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.alpha_wd) || !ok(self.beta) {
            return Err(Error::Config("alpha_wd and beta must be finite and >= 0".into()));
        }
        if !(self.z_lr > 0.0) || !(self.tune_lr > 0.0) || !(self.gan_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.gan_batch == 0 {
            return Err(Error::Config("gan_batch must be positive".into()));
        }
        Ok(())
    }
}
