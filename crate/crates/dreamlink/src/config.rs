//! Run configuration: one TOML document that pins every tunable in the
//! pipeline, plus a SHA-256 content hash embedded into all output artifacts
//! so any result can be traced back to the exact settings that produced it.

use crate::container::sha256_hex;
use crate::error::{Error, Result};
use crate::schedule::SigmaMode;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Environment variable carrying the external region-service URL.
pub const REGION_URL_ENV: &str = "DREAMLINK_REGION_URL";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ScheduleConfig {
    /// Training timestep count.
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma_mode: SigmaMode::Posterior,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Rendered image side length (images are square RGB).
    pub image_size: usize,
    /// Latent tensor channels.
    pub latent_channels: usize,
    /// Latent side length; the codec downsamples by image_size/latent_size.
    pub latent_size: usize,
    /// Denoiser channel widths per resolution level, finest first.
    pub widths: [usize; 3],
    /// Sinusoidal timestep-embedding dimension.
    pub time_dim: usize,
    /// Hidden width of the timestep MLP.
    pub time_chan: usize,
    /// Shared text/vision embedding dimension.
    pub embed_dim: usize,
    /// Maximum caption/instruction length in tokens.
    pub text_len: usize,
    /// Simulated brain-signal vector length.
    pub fmri_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            latent_channels: 4,
            latent_size: 16,
            widths: [16, 32, 64],
            time_dim: 64,
            time_chan: 128,
            embed_dim: 64,
            text_len: 16,
            fmri_dim: 2048,
        }
    }
}

/// Where edit-region masks come from at sampling time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    /// Heuristic proposer over the decoded in-flight estimate.
    #[default]
    Builtin,
    /// External HTTP service; URL from `DREAMLINK_REGION_URL`.
    External,
    /// Unmasked editing: every position instruction-conditioned.
    AllOnes,
}

/// What the value vectors of masked cross-attention come from for rows the
/// mask keeps instruction-conditioned vs null-conditioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskedValues {
    /// Masked-out rows take the full null-context pass (weights and values).
    #[default]
    NullValues,
    /// Blend attention weights between contexts but read instruction values.
    InstrValues,
}

/// When the automatic region proposal runs during sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegionTiming {
    /// Propose from the first clean estimate inside the single joint pass.
    #[default]
    InFlight,
    /// Run a full reconstruction first, propose, then sample again.
    TwoPass,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SamplingConfig {
    /// Lag (in inference steps) the instruction stream trails by.
    pub k: usize,
    /// Inference step count (strided from the training schedule).
    pub steps: usize,
    /// Classifier-free guidance scale on the instruction stream.
    pub cfg_scale: f64,
    pub region_mode: RegionMode,
    pub masked_values: MaskedValues,
    pub region_timing: RegionTiming,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            k: 15,
            steps: 50,
            cfg_scale: 7.5,
            region_mode: RegionMode::Builtin,
            masked_values: MaskedValues::NullValues,
            region_timing: RegionTiming::InFlight,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub codec_steps: usize,
    pub codec_batch: usize,
    pub codec_lr: f64,
    pub tower_steps: usize,
    pub tower_batch: usize,
    pub tower_lr: f64,
    pub mapper_steps: usize,
    pub mapper_batch: usize,
    pub mapper_lr: f64,
    /// Adds an extra refinement block on the mapper's vision head.  The
    /// default pipeline is plain align-then-regress without it.
    pub mapper_prior_head: bool,
    /// Denoiser-backbone pretraining (both streams), before adaptor tuning.
    pub backbone_steps: usize,
    pub backbone_batch: usize,
    pub backbone_lr: f64,
    pub adaptor_steps: usize,
    pub adaptor_batch: usize,
    pub adaptor_lr: f64,
    /// Probability of dropping conditioning during training, enabling
    /// classifier-free guidance at inference.
    pub cond_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            codec_steps: 500,
            codec_batch: 8,
            codec_lr: 2e-3,
            tower_steps: 900,
            tower_batch: 32,
            tower_lr: 1e-3,
            mapper_steps: 900,
            mapper_batch: 32,
            mapper_lr: 1e-3,
            mapper_prior_head: false,
            backbone_steps: 500,
            backbone_batch: 8,
            backbone_lr: 1e-3,
            adaptor_steps: 300,
            adaptor_batch: 16,
            adaptor_lr: 3e-4,
            cond_dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataConfig {
    /// Corpus size in triplets.
    pub n_triplets: usize,
    /// Instruction/edit pairs generated per source image.
    pub instructions_per_image: usize,
    /// Trials averaged per simulated measurement.
    pub fmri_trials: usize,
    /// Measurement noise standard deviation.
    pub fmri_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_triplets: 2000,
            instructions_per_image: 1,
            fmri_trials: 3,
            fmri_noise: 0.05,
        }
    }
}

/// The complete run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    /// Base seed; all stage RNG streams derive from it.
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub sampling: SamplingConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| Error::Validation(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::container::atomic_write(path, self.to_toml_string().as_bytes())
    }

    /// SHA-256 over the canonical TOML serialization. Two configs hash
    /// equal iff every effective setting matches.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml_string().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.train_steps < 1 {
            return Err(Error::Validation("train_steps must be >= 1".into()));
        }
        if !(s.beta_start > 0.0 && s.beta_start < 1.0 && s.beta_end > 0.0 && s.beta_end < 1.0) {
            return Err(Error::Validation("beta endpoints must lie in (0,1)".into()));
        }
        if s.beta_start > s.beta_end {
            return Err(Error::Validation("beta_start must not exceed beta_end".into()));
        }
        let sp = &self.sampling;
        if sp.k >= sp.steps {
            return Err(Error::Validation("K must be < steps".into()));
        }
        if sp.steps < 1 || sp.steps > s.train_steps {
            return Err(Error::Validation(format!(
                "steps must lie in 1..={}",
                s.train_steps
            )));
        }
        if !(sp.cfg_scale.is_finite() && sp.cfg_scale >= 0.0) {
            return Err(Error::Validation("cfg_scale must be finite and >= 0".into()));
        }
        let m = &self.model;
        if m.widths.iter().any(|&w| w == 0) {
            return Err(Error::Validation("model widths must be nonzero".into()));
        }
        if m.latent_size % 4 != 0 || m.latent_size == 0 {
            return Err(Error::Validation(
                "latent_size must be a nonzero multiple of 4 (two halvings inside the denoiser)"
                    .into(),
            ));
        }
        if m.image_size != 4 * m.latent_size {
            return Err(Error::Validation(
                "image_size must equal 4 * latent_size (fixed codec downsampling)".into(),
            ));
        }
        if m.embed_dim == 0 || m.text_len == 0 || m.fmri_dim == 0 || m.latent_channels == 0 {
            return Err(Error::Validation("model dimensions must be nonzero".into()));
        }
        if m.time_dim == 0 || m.time_dim % 2 != 0 {
            return Err(Error::Validation("time_dim must be a nonzero even number".into()));
        }
        let t = &self.train;
        if !(0.0..=1.0).contains(&t.cond_dropout) {
            return Err(Error::Validation("cond_dropout must lie in [0,1]".into()));
        }
        for (label, v) in [
            ("codec_lr", t.codec_lr),
            ("tower_lr", t.tower_lr),
            ("mapper_lr", t.mapper_lr),
            ("backbone_lr", t.backbone_lr),
            ("adaptor_lr", t.adaptor_lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!("{label} must be positive")));
            }
        }
        for (label, v) in [
            ("codec_batch", t.codec_batch),
            ("tower_batch", t.tower_batch),
            ("mapper_batch", t.mapper_batch),
            ("backbone_batch", t.backbone_batch),
            ("adaptor_batch", t.adaptor_batch),
        ] {
            if v == 0 {
                return Err(Error::Validation(format!("{label} must be >= 1")));
            }
        }
        if self.data.n_triplets < 10 {
            return Err(Error::Validation("n_triplets must be >= 10".into()));
        }
        if self.data.fmri_trials == 0 {
            return Err(Error::Validation("fmri_trials must be >= 1".into()));
        }
        if self.data.instructions_per_image == 0 {
            return Err(Error::Validation(
                "instructions_per_image must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Build the training-resolution schedule from this config.
    pub fn train_schedule(&self) -> Result<crate::schedule::DiffusionSchedule> {
        crate::schedule::make_schedule(
            self.schedule.train_steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
            self.schedule.sigma_mode,
        )
    }
}
