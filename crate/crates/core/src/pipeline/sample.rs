use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::denoiser::{predict_noise, DenoiserParams};
use crate::diffusion::{p_sample, p_sample_clipped, Conditioning, DiffusionStepInput};
use crate::error::Result;
use crate::image::Image;
use crate::masking::{patchify_image, unpatchify_image};
use crate::pyramid::{decompose, upsample};
use crate::rng::{self, normal_tensor};

/// Outputs of coarse-to-fine synthesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    /// One output per level, finest first; `levels[0]` is the final image.
    pub levels: Vec<Image>,
    /// Reverse steps run at each level, finest first.
    pub timesteps: Vec<usize>,
    pub seed: u64,
}

impl SampleTrace {
    pub fn output(&self) -> &Image {
        &self.levels[0]
    }
}

/// Synthesize the target modality for `source`. The coarsest level runs a
/// full reverse chain from pure noise conditioned on the downsampled source;
/// every finer level is additionally conditioned on the upsampled output of
/// the level below.
pub fn sample_hierarchical(
    source: &Image,
    params: &DenoiserParams,
    config: &TrainConfig,
    seed: u64,
) -> Result<SampleTrace> {
    config.validate()?;
    let sched = config.schedule()?;
    let p = config.patch_size();
    let l = config.num_levels;
    let src = decompose(source, config.alpha, l, p)?;
    let mut outputs: Vec<Image> = Vec::with_capacity(l);
    for n in (0..l).rev() {
        let (h, w) = src.level(n).dims();
        let grid = (h / p, w / p);
        let num_tokens = grid.0 * grid.1;
        let coarse = match outputs.last() {
            Some(prev) => Some(patchify_image(&upsample(prev, 1.0 / config.alpha, (h, w))?, p)?),
            None => None,
        };
        let cond = Conditioning {
            grid,
            level: n,
            num_levels: l,
            positions: (0..num_tokens).collect(),
            source: Some(patchify_image(src.level(n), p)?),
            coarse,
            visible: None,
        };
        let mut r = rng::stream(seed, &[n as u64]);
        let mut x = normal_tensor(&[num_tokens, p * p], &mut r);
        let mut input = DiffusionStepInput { x_t: x.clone(), t: 1, cond };
        for t in (1..=sched.steps()).rev() {
            input.x_t = x;
            input.t = t;
            let eps_hat = predict_noise(params, &config.denoiser, &input)?;
            x = if config.clip_denoised {
                p_sample_clipped(&input.x_t, t, &eps_hat, &sched, (-1.0, 1.0), &mut r)?
            } else {
                p_sample(&input.x_t, t, &eps_hat, &sched, &mut r)?
            };
        }
        outputs.push(unpatchify_image(&x, grid, p)?.clamped(-1.0, 1.0));
    }
    outputs.reverse();
    Ok(SampleTrace {
        timesteps: vec![sched.steps(); l],
        levels: outputs,
        seed,
    })
}
