use serde::{Deserialize, Serialize};

use crate::cgr::KernelSpec;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::masking::validate_ratios;
use crate::pyramid::{level_dims, validate_alpha};

/// Everything that determines a training run besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub num_levels: usize,
    /// Diffusion steps `T`; betas follow the linear schedule rescaled to `T`.
    pub timesteps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Weight of the cross-granularity regularizer.
    pub lambda: f64,
    pub r_fine: f64,
    pub r_coarse: f64,
    /// Probability that a level of a training element uses the whole image
    /// as the diffusion region, matching the unmasked inference setting.
    pub full_region_prob: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Clamp the implied clean image to [-1, 1] at every reverse step.
    pub clip_denoised: bool,
    pub kernel: KernelSpec,
    pub denoiser: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            num_levels: 3,
            timesteps: 1000,
            batch_size: 10,
            epochs: 10,
            learning_rate: 1e-4,
            lambda: 0.1,
            r_fine: 0.75,
            r_coarse: 0.25,
            full_region_prob: 0.25,
            seed: 0,
            checkpoint_every: 1,
            clip_denoised: false,
            kernel: KernelSpec::default(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_alpha(self.alpha)?;
        validate_ratios(self.r_fine, self.r_coarse)?;
        self.denoiser.validate()?;
        if self.num_levels == 0 {
            return Err(Error::config("num_levels must be at least 1"));
        }
        if self.num_levels > self.denoiser.max_levels {
            return Err(Error::config(format!(
                "num_levels {} exceeds the denoiser's max_levels {}",
                self.num_levels, self.denoiser.max_levels
            )));
        }
        if self.timesteps == 0 {
            return Err(Error::config("timesteps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.full_region_prob) {
            return Err(Error::config(format!(
                "full_region_prob must be in [0, 1], got {}",
                self.full_region_prob
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::scaled_linear(self.timesteps)
    }

    pub fn patch_size(&self) -> usize {
        self.denoiser.patch_size
    }

    /// Image dims of every level, finest first.
    pub fn level_dims(&self, dims: (usize, usize)) -> Result<Vec<(usize, usize)>> {
        level_dims(dims, self.alpha, self.num_levels, self.patch_size())
    }

    /// Stable 64-bit hash of the canonical JSON form, used to detect resumes
    /// under a different configuration.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::data::fnv1a64(&json)
    }
}
