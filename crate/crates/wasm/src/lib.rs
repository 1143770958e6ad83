//! Browser bindings for three views of the model's data path: the pyramid of
//! a synthetic phantom, its forward diffusion at a chosen step, and the
//! per-level patch masks used during training.
//!
//! The plain functions are ordinary Rust and tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors for JavaScript.

use pyrdiff::data::{generate_phantom_pair, PairedSample};
use pyrdiff::diffusion::{q_sample, NoiseSchedule};
use pyrdiff::image::Image;
use pyrdiff::masking::{level_mask_ratio, sample_mask, validate_ratios};
use pyrdiff::pyramid::decompose;
use pyrdiff::rng::{self, normal_tensor};
use wasm_bindgen::prelude::*;

/// Patch edge used for pyramid divisibility and masking.
pub const PATCH: usize = 4;

/// An 8-bit grayscale image, row-major.
#[wasm_bindgen]
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

#[wasm_bindgen]
impl Frame {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn gray(&self) -> Vec<u8> {
        self.pixels.clone()
    }

    /// Pixels expanded to RGBA for `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|&v| [v, v, v, 255]).collect()
    }
}

impl Frame {
    /// Maps `[-1, 1]` onto `[0, 255]`, clamping outside values.
    pub fn from_image(image: &Image) -> Self {
        let pixels = image.pixels().iter().map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8).collect();
        Self { width: image.width() as u32, height: image.height() as u32, pixels }
    }
}

type Result<T> = std::result::Result<T, String>;

fn text(e: pyrdiff::Error) -> String {
    e.to_string()
}

pub fn phantom(seed: u32, size: u32, difficulty: f64) -> Result<PairedSample> {
    if size == 0 || size > 512 {
        return Err(format!("size must be in 1..=512, got {size}"));
    }
    generate_phantom_pair(seed as u64, (size as usize, size as usize), difficulty).map_err(text)
}

fn pick(pair: &PairedSample, target: bool) -> &Image {
    if target {
        &pair.target
    } else {
        &pair.source
    }
}

/// Every pyramid level of one modality, finest first.
pub fn pyramid_frames(seed: u32, size: u32, difficulty: f64, target: bool, levels: u32, alpha: f64) -> Result<Vec<Frame>> {
    let pair = phantom(seed, size, difficulty)?;
    let p = decompose(pick(&pair, target), alpha, levels as usize, PATCH).map_err(text)?;
    Ok(p.levels().iter().map(Frame::from_image).collect())
}

pub fn alpha_bar(t: u32, timesteps: u32) -> Result<f64> {
    let s = NoiseSchedule::scaled_linear(timesteps as usize).map_err(text)?;
    if t == 0 {
        return Ok(1.0);
    }
    if t > timesteps {
        return Err(format!("t must be at most {timesteps}, got {t}"));
    }
    Ok(s.alpha_bar(t as usize))
}

/// The target image noised to step `t` of a `timesteps`-step schedule; step
/// 0 returns the clean image.
pub fn diffuse(seed: u32, size: u32, difficulty: f64, t: u32, timesteps: u32, noise_seed: u32) -> Result<Frame> {
    let pair = phantom(seed, size, difficulty)?;
    alpha_bar(t, timesteps)?;
    if t == 0 {
        return Ok(Frame::from_image(&pair.target));
    }
    let sched = NoiseSchedule::scaled_linear(timesteps as usize).map_err(text)?;
    let x0 = pair.target.to_tensor();
    let eps = normal_tensor(x0.shape(), &mut rng::seeded(noise_seed as u64));
    let xt = q_sample(&x0, t as usize, &eps, &sched).map_err(text)?;
    let image = Image::new(pair.target.height(), pair.target.width(), xt.into_data()).map_err(text)?;
    Ok(Frame::from_image(&image))
}

/// Gray level painted over masked patches.
pub const MASK_GRAY: u8 = 128;

/// Pyramid of the target with each level's training mask painted over it.
/// The mask ratio falls linearly from `r_fine` to `r_coarse`.
#[allow(clippy::too_many_arguments)]
pub fn mask_frames(
    seed: u32,
    size: u32,
    difficulty: f64,
    levels: u32,
    alpha: f64,
    r_fine: f64,
    r_coarse: f64,
    mask_seed: u32,
) -> Result<Vec<Frame>> {
    validate_ratios(r_fine, r_coarse).map_err(text)?;
    let pair = phantom(seed, size, difficulty)?;
    let l = levels as usize;
    let p = decompose(&pair.target, alpha, l, PATCH).map_err(text)?;
    let mut frames = Vec::with_capacity(l);
    for (n, level) in p.levels().iter().enumerate() {
        let mut f = Frame::from_image(level);
        let (gh, gw) = (level.height() / PATCH, level.width() / PATCH);
        let ratio = level_mask_ratio(n, l, r_fine, r_coarse);
        let plan = sample_mask(gh * gw, ratio, &mut rng::stream(mask_seed as u64, &[n as u64])).map_err(text)?;
        for &k in &plan.masked {
            let (py, px) = (k / gw * PATCH, k % gw * PATCH);
            for y in py..py + PATCH {
                let row = y * level.width();
                f.pixels[row + px..row + px + PATCH].fill(MASK_GRAY);
            }
        }
        frames.push(f);
    }
    Ok(frames)
}

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = pyramid)]
pub fn pyramid_js(seed: u32, size: u32, difficulty: f64, target: bool, levels: u32, alpha: f64) -> std::result::Result<Vec<Frame>, JsError> {
    js(pyramid_frames(seed, size, difficulty, target, levels, alpha))
}

#[wasm_bindgen(js_name = diffuse)]
pub fn diffuse_js(seed: u32, size: u32, difficulty: f64, t: u32, timesteps: u32, noise_seed: u32) -> std::result::Result<Frame, JsError> {
    js(diffuse(seed, size, difficulty, t, timesteps, noise_seed))
}

#[wasm_bindgen(js_name = alphaBar)]
pub fn alpha_bar_js(t: u32, timesteps: u32) -> std::result::Result<f64, JsError> {
    js(alpha_bar(t, timesteps))
}

#[wasm_bindgen(js_name = masks)]
#[allow(clippy::too_many_arguments)]
pub fn masks_js(
    seed: u32,
    size: u32,
    difficulty: f64,
    levels: u32,
    alpha: f64,
    r_fine: f64,
    r_coarse: f64,
    mask_seed: u32,
) -> std::result::Result<Vec<Frame>, JsError> {
    js(mask_frames(seed, size, difficulty, levels, alpha, r_fine, r_coarse, mask_seed))
}
