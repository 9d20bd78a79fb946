//! Run configuration. Unknown keys anywhere are rejected so that a misspelt
//! ablation setting cannot silently fall back to a default.

use std::fs;
use std::path::{Path, PathBuf};

use histogen_core::backbone::{ConditionKind, LatentShape, ModelConfig};
use histogen_core::diffusion::{make_schedule, NoiseSchedule};
use histogen_core::encoders::{SurrogateEncoderParams, VAE_STRIDE};
use histogen_core::synthdata::IMAGE_SIZE;
use histogen_core::training::TrainOptions;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub depth: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub patch_size: usize,
    pub latent: LatentShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    #[serde(rename = "T")]
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Write an intermediate checkpoint every this many steps; 0 writes only
    /// the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_train: usize,
    pub n_eval: usize,
    pub image_size: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub drop: Vec<ConditionKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub out_dir: PathBuf,
    pub dataset_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelSection,
    pub diffusion: DiffusionSection,
    pub train: TrainSection,
    pub data: DataSection,
    #[serde(default)]
    pub ablation: AblationSection,
    pub paths: PathsSection,
}

impl Default for Config {
    /// The toy configuration: two blocks of width 32, 200 diffusion steps.
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            seed: 0,
            model: ModelSection {
                depth: m.depth,
                d_model: m.d_model,
                n_heads: m.n_heads,
                patch_size: m.patch_size,
                latent: m.latent,
            },
            diffusion: DiffusionSection {
                t: 200,
                beta_start: 1e-4,
                beta_end: 0.03,
            },
            train: TrainSection {
                steps: 2000,
                batch_size: 8,
                lr: 1e-3,
                clip_norm: 1.0,
                checkpoint_every: 0,
            },
            data: DataSection {
                n_train: 256,
                n_eval: 32,
                image_size: IMAGE_SIZE,
            },
            ablation: AblationSection::default(),
            paths: PathsSection {
                out_dir: PathBuf::from("runs/default"),
                dataset_dir: PathBuf::from("data"),
            },
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: Config = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model_config().validate()?;
        self.schedule()?;
        let d = &self.data;
        if d.image_size != IMAGE_SIZE {
            return Err(CliError::Config(format!(
                "data.image_size must be {IMAGE_SIZE}, the synthetic generator's tile size"
            )));
        }
        let l = self.model.latent;
        if l.h * VAE_STRIDE != d.image_size || l.w * VAE_STRIDE != d.image_size {
            return Err(CliError::Config(format!(
                "latent {}×{} does not match image_size {} at stride {VAE_STRIDE}",
                l.h, l.w, d.image_size
            )));
        }
        if d.n_train == 0 {
            return Err(CliError::Config("data.n_train must be positive".into()));
        }
        if d.n_eval < 2 {
            return Err(CliError::Config("data.n_eval must be at least 2 for feature statistics".into()));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(CliError::Config("train.batch_size must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(t.clip_norm > 0.0 && t.clip_norm.is_finite()) {
            return Err(CliError::Config("train.lr and train.clip_norm must be positive".into()));
        }
        let mut seen = Vec::new();
        for k in &self.ablation.drop {
            if seen.contains(k) {
                return Err(CliError::Config(format!("ablation.drop lists {} twice", k.name())));
            }
            seen.push(*k);
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            depth: m.depth,
            d_model: m.d_model,
            n_heads: m.n_heads,
            patch_size: m.patch_size,
            latent: m.latent,
            timesteps: self.diffusion.t,
        }
    }

    pub fn encoder_params(&self) -> SurrogateEncoderParams {
        SurrogateEncoderParams {
            d_model: self.model.d_model,
            latent_channels: self.model.latent.channels,
            patch_size: self.model.patch_size,
            ..SurrogateEncoderParams::default()
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        let d = &self.diffusion;
        Ok(make_schedule(d.t, d.beta_start, d.beta_end)?)
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            clip_norm: self.train.clip_norm,
            seed: self.seed,
        }
    }
}
