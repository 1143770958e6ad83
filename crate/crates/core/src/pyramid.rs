//! Multi-resolution decomposition and the coarse-to-fine hand-off.
//!
//! Level 0 is the original image; level `n` has dimensions
//! `floor(alpha * dims(n - 1))`. Sampling runs from the last (coarsest) level
//! back to level 0, and each finished level is upsampled to the next finer
//! grid and handed to it as a conditioning channel.

use crate::error::{Error, Result};
use crate::image::Image;

/// Resolution hierarchy ordered fine → coarse.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    levels: Vec<Image>,
    alpha: f64,
}

impl Pyramid {
    pub fn levels(&self) -> &[Image] {
        &self.levels
    }

    pub fn level(&self, n: usize) -> &Image {
        &self.levels[n]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn coarsest(&self) -> &Image {
        self.levels.last().expect("pyramid has at least one level")
    }

    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(Image::dims).collect()
    }

    pub fn into_levels(self) -> Vec<Image> {
        self.levels
    }
}

fn scaled(dim: usize, alpha: f64) -> usize {
    // Tolerate representation error so that e.g. 0.3 * 10 floors to 3.
    (alpha * dim as f64 + 1e-9).floor() as usize
}

pub fn validate_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!(
            "scale factor alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// Dimensions of every level, checked for patch divisibility.
pub fn level_dims(
    dims: (usize, usize),
    alpha: f64,
    num_levels: usize,
    patch_size: usize,
) -> Result<Vec<(usize, usize)>> {
    validate_alpha(alpha)?;
    if num_levels == 0 {
        return Err(Error::config("a pyramid needs at least one level"));
    }
    if patch_size == 0 {
        return Err(Error::config("patch size must be positive"));
    }
    let mut out = Vec::with_capacity(num_levels);
    let (mut h, mut w) = dims;
    for n in 0..num_levels {
        if n > 0 {
            h = scaled(h, alpha);
            w = scaled(w, alpha);
        }
        if h == 0 || w == 0 || h % patch_size != 0 || w % patch_size != 0 {
            return Err(Error::config(format!(
                "pyramid level {n} has dims {h}x{w}, not divisible by patch size {patch_size}"
            )));
        }
        out.push((h, w));
    }
    Ok(out)
}

/// Build the pyramid by repeated downsampling.
pub fn decompose(image: &Image, alpha: f64, num_levels: usize, patch_size: usize) -> Result<Pyramid> {
    level_dims(image.dims(), alpha, num_levels, patch_size)?;
    let mut levels = Vec::with_capacity(num_levels);
    levels.push(image.clone());
    for _ in 1..num_levels {
        let next = downsample(levels.last().unwrap(), alpha)?;
        levels.push(next);
    }
    Ok(Pyramid { levels, alpha })
}

fn integer_reciprocal(alpha: f64) -> Option<usize> {
    let k = (1.0 / alpha).round();
    ((1.0 / alpha - k).abs() < 1e-9 && k >= 1.0).then_some(k as usize)
}

/// Shrink by `alpha`: box average over `1/alpha` blocks when that is an
/// integer, bilinear resampling otherwise.
pub fn downsample(image: &Image, alpha: f64) -> Result<Image> {
    validate_alpha(alpha)?;
    let (h, w) = image.dims();
    let (oh, ow) = (scaled(h, alpha), scaled(w, alpha));
    if oh == 0 || ow == 0 {
        return Err(Error::config(format!(
            "downsampling {h}x{w} by {alpha} leaves an empty image"
        )));
    }
    match integer_reciprocal(alpha) {
        Some(k) => {
            let norm = 1.0 / (k * k) as f64;
            Ok(Image::from_fn(oh, ow, |y, x| {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += image.get(y * k + dy, x * k + dx);
                    }
                }
                acc * norm
            }))
        }
        None => Ok(resize_bilinear(image, oh, ow)),
    }
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w) = image.dims();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coord = |o: usize, s: f64, n: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    Image::from_fn(out_h, out_w, |y, x| {
        let (y0, y1, fy) = coord(y, sy, h);
        let (x0, x1, fx) = coord(x, sx, w);
        let top = image.get(y0, x0) * (1.0 - fx) + image.get(y0, x1) * fx;
        let bottom = image.get(y1, x0) * (1.0 - fx) + image.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Enlarge by `factor` (the reciprocal of the pyramid's alpha) onto a grid
/// that must be exactly `target`.
pub fn upsample(image: &Image, factor: f64, target: (usize, usize)) -> Result<Image> {
    if factor <= 1.0 {
        return Err(Error::config(format!("upsampling factor must exceed 1, got {factor}")));
    }
    let (h, w) = image.dims();
    let expect_h = (h as f64 * factor).round() as usize;
    let expect_w = (w as f64 * factor).round() as usize;
    // floor() in the forward recurrence may drop a row, so accept either.
    let fits = |e: usize, t: usize| t == e || t == e + 1 || t + 1 == e;
    if !fits(expect_h, target.0) || !fits(expect_w, target.1) {
        return Err(Error::contract(format!(
            "upsampling {h}x{w} by {factor} cannot produce the {}x{} target level",
            target.0, target.1
        )));
    }
    Ok(resize_bilinear(image, target.0, target.1))
}

/// Conditioning for one pyramid level: the source modality at that level and
/// the upsampled reconstruction of the level below it.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningImage {
    pub source: Image,
    pub coarse: Image,
}

/// Pair the upsampled coarse reconstruction with the finer level's source.
/// Both channels are kept as-is; blending is left to the denoiser.
pub fn merge(coarse_recon: &Image, fine_source: &Image) -> Result<ConditioningImage> {
    coarse_recon.check_same_dims(fine_source, "merge")?;
    Ok(ConditioningImage {
        source: fine_source.clone(),
        coarse: coarse_recon.clone(),
    })
}
