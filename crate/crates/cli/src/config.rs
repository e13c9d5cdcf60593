//! TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use sparsedit_core::diffusion::{NoiseConfig, NoiseSchedule, OptimizerConfig, SyntheticDataset, TrainConfig};
use sparsedit_core::model::ModelConfig;
use sparsedit_core::schedule::{default_ladder, PruneSchedule};
use sparsedit_core::TokenGrid;

use crate::error::CliError;

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum ModelSection {
    Preset {
        preset: String,
        /// Latent side for the DiT presets (32 for 256² images, 64 for 512²).
        #[serde(default)]
        latent: Option<usize>,
        #[serde(default)]
        timesteps: Option<usize>,
    },
    Full(ModelConfig),
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig, CliError> {
        let cfg = match self {
            ModelSection::Full(c) => c.clone(),
            ModelSection::Preset { preset, latent, timesteps } => {
                let l = latent.unwrap_or(32);
                let mut c = match preset.as_str() {
                    "toy" => ModelConfig::toy(),
                    "toy_dense" => {
                        let t = ModelConfig::toy();
                        ModelConfig {
                            n_bottom: 0,
                            sdtm: Vec::new(),
                            n_top: t.depth(),
                            ..t
                        }
                    }
                    "dit_xl" => ModelConfig::dit_xl(l),
                    "sparse_xl" => ModelConfig::sparse_xl(l),
                    "dit_b" => ModelConfig::dit_b(l),
                    "sparse_b" => ModelConfig::sparse_b(l),
                    other => {
                        return Err(CliError::config(
                            "model.preset",
                            format!("unknown preset {other:?} (toy, toy_dense, dit_xl, sparse_xl, dit_b, sparse_b)"),
                        ))
                    }
                };
                if let Some(t) = timesteps {
                    c.timesteps = *t;
                }
                c
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub r_min: f64,
    pub r_max: f64,
    /// Realizable grids in increasing pruning rate; derived when omitted.
    #[serde(default)]
    pub ladder: Option<Vec<TokenGrid>>,
}

impl ScheduleSection {
    pub fn build(&self, dense: TokenGrid, steps: usize) -> Result<PruneSchedule, CliError> {
        let ladder = match &self.ladder {
            Some(l) => l.clone(),
            None => default_ladder(dense, self.r_min, self.r_max)?,
        };
        Ok(PruneSchedule::new(self.r_min, self.r_max, steps, dense, ladder)?)
    }
}

fn default_beta_start() -> f64 {
    1e-4
}

fn default_beta_end() -> f64 {
    2e-2
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default)]
    pub scale_to_steps: bool,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
            scale_to_steps: false,
        }
    }
}

fn default_label_dropout() -> f64 {
    0.1
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    #[serde(default = "default_label_dropout")]
    pub label_dropout: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Start from this checkpoint instead of a fresh initialization.
    #[serde(default)]
    pub init: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum SampleMethod {
    Ddpm,
    Ddim,
}

fn default_guidance() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub method: SampleMethod,
    pub n: usize,
    /// One label per sample; cycles through the classes when omitted.
    #[serde(default)]
    pub labels: Option<Vec<usize>>,
    /// DDIM step count.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub eta: f64,
    #[serde(default = "default_guidance")]
    pub guidance: f64,
    /// Follow the pruning schedule; otherwise use the dense grid throughout.
    #[serde(default = "default_true")]
    pub use_schedule: bool,
    /// Clamp each predicted x0 to the data range [-1, 1].
    #[serde(default = "default_true")]
    pub clip_denoised: bool,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsSection {
    /// Timesteps to average over; the model's own count when omitted.
    #[serde(default)]
    pub timesteps: Option<usize>,
    #[serde(default)]
    pub cfg_doubling: bool,
}

fn default_probes() -> usize {
    4
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub timesteps: Vec<usize>,
    #[serde(default = "default_probes")]
    pub probes: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub k: usize,
    pub t: usize,
    #[serde(default = "default_probes")]
    pub probes: usize,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_radius")]
    pub radius: usize,
    /// Separate from the run seed so the dataset stays fixed across runs.
    #[serde(default)]
    pub seed: u64,
}

fn default_size() -> usize {
    16
}

fn default_classes() -> usize {
    4
}

fn default_radius() -> usize {
    2
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            size: default_size(),
            classes: default_classes(),
            radius: default_radius(),
            seed: 0,
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds initialization, data order, noise and sampling.
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default)]
    pub schedule: Option<ScheduleSection>,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub sample: Option<SampleSection>,
    #[serde(default)]
    pub flops: Option<FlopsSection>,
    #[serde(default)]
    pub profile: Option<ProfileSection>,
    #[serde(default)]
    pub ablate: Option<AblateSection>,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(CliError::from_toml)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_str(&text)?;
        // relative paths inside the file are relative to the file
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            cfg.train.as_mut().and_then(|t| t.init.as_mut()),
            cfg.sample.as_mut().and_then(|s| s.checkpoint.as_mut()),
            cfg.profile.as_mut().and_then(|s| s.checkpoint.as_mut()),
            cfg.ablate.as_mut().and_then(|s| s.checkpoint.as_mut()),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut cfg.output.dir);
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        self.model.resolve()
    }

    pub fn noise_schedule(&self, timesteps: usize) -> Result<NoiseSchedule, CliError> {
        Ok(NoiseSchedule::from_config(&NoiseConfig {
            timesteps,
            beta_start: self.noise.beta_start,
            beta_end: self.noise.beta_end,
            scale_to_steps: self.noise.scale_to_steps,
        })?)
    }

    pub fn prune_schedule(&self, model: &ModelConfig, steps: usize) -> Result<Option<PruneSchedule>, CliError> {
        match (&self.schedule, model.has_sparse_tokens()) {
            (Some(s), true) => Ok(Some(s.build(model.dense_grid(), steps)?)),
            _ => Ok(None),
        }
    }

    pub fn dataset(&self) -> Result<SyntheticDataset, CliError> {
        let d = self.data;
        Ok(SyntheticDataset::new(d.size, d.classes, d.radius, d.seed)?)
    }

    pub fn train_config(&self) -> Result<(TrainConfig, Option<PathBuf>), CliError> {
        let t = self.train.as_ref().ok_or_else(|| CliError::config("train", "section missing"))?;
        let cfg = TrainConfig {
            steps: t.steps,
            batch: t.batch,
            seed: self.seed,
            label_dropout: t.label_dropout,
            optimizer: t.optimizer,
        };
        cfg.validate()?;
        Ok((cfg, t.init.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_and_full_configs_parse() {
        let c = RunConfig::from_str("[model]\npreset = \"sparse_xl\"\n[flops]\ntimesteps = 250\n").unwrap();
        assert_eq!(c.model_config().unwrap().depth(), 28);
        let text = r#"
            [model]
            img = { h = 8, w = 8, channels = 1 }
            patch = 2
            width = 16
            heads = 2
            n_bottom = 1
            n_top = 1
            sdtm = [{ n_sparse = 1, n_dense = 0 }]
            num_classes = 2
            timesteps = 10
        "#;
        let c = RunConfig::from_str(text).unwrap();
        assert_eq!(c.model_config().unwrap().width, 16);
    }

    #[test]
    fn unknown_fields_are_named() {
        let e = RunConfig::from_str("[model]\npreset = \"toy\"\n[train]\nsteps = 1\nbatch = 2\nbogus = 3\n").unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = RunConfig::from_str("[model]\npreset = \"toy\"\n[train]\nsteps = 1\nbatch = 0\n")
            .unwrap()
            .train_config()
            .unwrap_err();
        assert_eq!(e.field.as_deref(), Some("train.batch"));
    }
}
