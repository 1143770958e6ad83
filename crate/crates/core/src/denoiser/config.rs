use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the visible-patch encoder and the conditional denoiser.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_encoder_blocks: usize,
    pub num_decoder_blocks: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub mlp_ratio: usize,
    /// Width of the sinusoidal timestep features.
    pub time_embed_dim: usize,
    /// Size of the learned per-level embedding table.
    pub max_levels: usize,
    pub max_tokens: usize,
    /// Encode clean visible patches instead of their noised versions.
    pub encode_clean_visible: bool,
    /// Add a learned linear map of the noisy patch to the output.
    pub input_skip: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_heads: 4,
            num_encoder_blocks: 2,
            num_decoder_blocks: 4,
            patch_size: 8,
            channels: 1,
            mlp_ratio: 4,
            time_embed_dim: 64,
            max_levels: 4,
            max_tokens: 4096,
            encode_clean_visible: false,
            input_skip: true,
        }
    }
}

impl DenoiserConfig {
    /// Smallest useful configuration; used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 16,
            num_heads: 1,
            num_encoder_blocks: 1,
            num_decoder_blocks: 1,
            patch_size: 4,
            channels: 1,
            mlp_ratio: 2,
            time_embed_dim: 16,
            max_levels: 3,
            max_tokens: 256,
            encode_clean_visible: false,
            input_skip: true,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_decoder_blocks", self.num_decoder_blocks),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("mlp_ratio", self.mlp_ratio),
            ("time_embed_dim", self.time_embed_dim),
            ("max_levels", self.max_levels),
            ("max_tokens", self.max_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("denoiser {name} must be positive")));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::config("embed_dim must be a multiple of 4 for 2-D position features"));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim must be even"));
        }
        Ok(())
    }
}
