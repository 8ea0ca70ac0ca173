use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::models::{DiscriminatorKind, DiscriminatorSpec, GeneratorKind, GeneratorSpec};
use crate::structured::PadKind;
use crate::tensor::AdamConfig;
use crate::tiling::pattern::PatternName;
use crate::tiling::TileMode;
use crate::training::{FitTuneConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 20x20 images, small ladders.
    #[default]
    Desk,
    /// 80x80 images, 512-channel first map.
    Reference,
}

/// Which networks to build. Explicit specs override the profile presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: GeneratorKind,
    pub profile: Profile,
    /// Defaults to symmetric for the z′ and flip generators, standard
    /// otherwise.
    pub discriminator: Option<DiscriminatorKind>,
    pub generator_spec: Option<GeneratorSpec>,
    pub discriminator_spec: Option<DiscriminatorSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: GeneratorKind::Zprime,
            profile: Profile::Desk,
            discriminator: None,
            generator_spec: None,
            discriminator_spec: None,
        }
    }
}

impl ModelConfig {
    pub fn specs(&self) -> Result<(GeneratorSpec, DiscriminatorSpec)> {
        let g = match &self.generator_spec {
            Some(g) => g.clone(),
            None => match self.profile {
                Profile::Desk => GeneratorSpec::desk(self.kind),
                Profile::Reference => GeneratorSpec::reference(self.kind),
            },
        };
        let dk = self.discriminator.unwrap_or(if g.kind.symmetric_kernels() {
            DiscriminatorKind::Symmetric
        } else {
            DiscriminatorKind::Standard
        });
        let d = match &self.discriminator_spec {
            Some(d) => d.clone(),
            None => match self.profile {
                Profile::Desk => DiscriminatorSpec::desk(dk),
                Profile::Reference => DiscriminatorSpec::reference(dk),
            },
        };
        g.validate()?;
        d.validate()?;
        Ok((g, d))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileConfig {
    /// Side of the generated patch.
    pub patch: usize,
    pub pattern: PatternName,
    /// Side of the crops the discriminator judges.
    pub crop: usize,
    pub mode: TileMode,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub z_dim: usize,
    pub adam_g: AdamConfig,
    pub adam_d: AdamConfig,
    pub eval_every: usize,
    /// Side of the synthetic source texture used when no file is given.
    pub texture_size: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            patch: 64,
            pattern: PatternName::Grid,
            crop: 64,
            mode: TileMode::Cyclic,
            batch: 64,
            steps: 2000,
            seed: 0,
            z_dim: 32,
            adam_g: AdamConfig::default(),
            adam_d: AdamConfig::default(),
            eval_every: 250,
            texture_size: 128,
        }
    }
}

impl TileConfig {
    pub fn specs(&self) -> Result<(GeneratorSpec, DiscriminatorSpec)> {
        let (kind, pad) = match self.mode {
            TileMode::Cyclic => (GeneratorKind::Cyclic, PadKind::for_pattern(self.pattern)?),
            TileMode::Crop => (GeneratorKind::Baseline, PadKind::Zero),
        };
        let mut g = GeneratorSpec::texture(kind, pad);
        g.z_dim = self.z_dim;
        let scale = 1usize << g.stages();
        if self.patch == 0 || self.patch % scale != 0 {
            return Err(Error::Config(format!("tile patch {} must be a positive multiple of {scale}", self.patch)));
        }
        g.base = self.patch / scale;
        if self.crop == 0 {
            return Err(Error::Config("tile crop must be positive".into()));
        }
        if self.mode == TileMode::Cyclic && self.crop != self.patch {
            return Err(Error::Config(format!(
                "cyclic mode judges whole patches: crop {} must equal patch {}",
                self.crop, self.patch
            )));
        }
        let d = DiscriminatorSpec { input: self.crop, ..DiscriminatorSpec::texture() };
        g.validate()?;
        d.validate()?;
        Ok((g, d))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Parent of all run directories.
    pub out_dir: PathBuf,
    /// Run directory name; defaults to the command name.
    pub name: Option<String>,
    /// Seed for latents drawn by evaluation commands.
    pub seed: u64,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig { out_dir: PathBuf::from("runs"), name: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fit: FitTuneConfig,
    pub tile: TileConfig,
    pub io: IoConfig,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses `a.b.c=value`. The value is read as JSON when it parses, else as
/// a plain string.
fn apply_set(cfg: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = cfg;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(Error::Config(format!("override {assignment:?} has an empty key")));
        }
        let obj = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just set")
            }
            _ => return Err(Error::Config(format!("override {assignment:?}: {key:?} is not inside a section"))),
        };
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

impl RunConfig {
    /// `base`, then the file, then each `key=value` override; unknown keys
    /// anywhere are rejected.
    pub fn resolve(base: Option<Value>, file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
        let mut v = serde_json::to_value(RunConfig::default())?;
        if let Some(b) = base {
            merge(&mut v, b);
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            let over: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
            if !over.is_object() {
                return Err(Error::Config(format!("config {} must be a JSON object", path.display())));
            }
            merge(&mut v, over);
        }
        for s in sets {
            apply_set(&mut v, s)?;
        }
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.train.validate()?;
        cfg.fit.validate()?;
        Ok(cfg)
    }
}
