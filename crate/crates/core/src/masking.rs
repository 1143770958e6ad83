//! Patch tokenization and random patch masking.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// Flattened non-overlapping patches of a `B×C×H×W` batch.
///
/// `tokens` has shape `B×N×(p²·C)`; patches are numbered row-major over the
/// `(H/p)×(W/p)` grid and each token lists its channels in order, each
/// channel's patch in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub tokens: Tensor,
    pub patch_size: usize,
    pub grid: (usize, usize),
    pub channels: usize,
}

impl TokenBatch {
    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

pub fn patchify(image_batch: &Tensor, p: usize) -> Result<TokenBatch> {
    let &[b, c, h, w] = image_batch.shape() else {
        return Err(Error::shape(
            "patchify",
            format!("expected B×C×H×W, got {:?}", image_batch.shape()),
        ));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            "patchify",
            format!("patch size {p} does not divide {h}x{w}"),
        ));
    }
    let (gh, gw) = (h / p, w / p);
    let n = gh * gw;
    let d = p * p * c;
    let src = image_batch.data();
    let mut out = vec![0.0; b * n * d];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = gy * gw + gx;
                let base = (bi * n + tok) * d;
                for ci in 0..c {
                    for py in 0..p {
                        let row = ((bi * c + ci) * h + gy * p + py) * w + gx * p;
                        let dst = base + ci * p * p + py * p;
                        out[dst..dst + p].copy_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Ok(TokenBatch {
        tokens: Tensor::new(vec![b, n, d], out)?,
        patch_size: p,
        grid: (gh, gw),
        channels: c,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &TokenBatch) -> Result<Tensor> {
    let (gh, gw) = tokens.grid;
    let (p, c) = (tokens.patch_size, tokens.channels);
    let &[b, n, d] = tokens.tokens.shape() else {
        return Err(Error::shape("unpatchify", "expected B×N×D tokens"));
    };
    if n != gh * gw || d != p * p * c {
        return Err(Error::shape(
            "unpatchify",
            format!("tokens {:?} do not match grid {gh}x{gw} with p={p}, C={c}", tokens.tokens.shape()),
        ));
    }
    let (h, w) = (gh * p, gw * p);
    let src = tokens.tokens.data();
    let mut out = vec![0.0; b * c * h * w];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let base = (bi * n + gy * gw + gx) * d;
                for ci in 0..c {
                    for py in 0..p {
                        let row = ((bi * c + ci) * h + gy * p + py) * w + gx * p;
                        let s = base + ci * p * p + py * p;
                        out[row..row + p].copy_from_slice(&src[s..s + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out)
}

/// Tokens of a single image as an `N×p²` matrix.
pub fn patchify_image(image: &Image, p: usize) -> Result<Tensor> {
    let tb = patchify(&image.to_tensor(), p)?;
    let (n, d) = (tb.num_tokens(), tb.token_dim());
    tb.tokens.reshaped(&[n, d])
}

/// Inverse of [`patchify_image`].
pub fn unpatchify_image(tokens: &Tensor, grid: (usize, usize), p: usize) -> Result<Image> {
    let n = grid.0 * grid.1;
    let tb = TokenBatch {
        tokens: tokens.clone().reshaped(&[1, n, p * p])?,
        patch_size: p,
        grid,
        channels: 1,
    };
    let t = unpatchify(&tb)?;
    Image::new(grid.0 * p, grid.1 * p, t.into_data())
}

/// Which tokens are hidden from the encoder and carry the diffusion loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub num_tokens: usize,
}

impl MaskPlan {
    /// Build from an explicit masked set; the visible set is its complement.
    pub fn from_masked(num_tokens: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if let Some(&bad) = masked.iter().find(|&&i| i >= num_tokens) {
            return Err(Error::contract(format!(
                "masked index {bad} out of range for {num_tokens} tokens"
            )));
        }
        let mut is_masked = vec![false; num_tokens];
        for &i in &masked {
            is_masked[i] = true;
        }
        let visible = (0..num_tokens).filter(|&i| !is_masked[i]).collect();
        Ok(Self {
            masked,
            visible,
            num_tokens,
        })
    }

    /// Every token masked, none visible (the inference layout).
    pub fn all_masked(num_tokens: usize) -> Self {
        Self {
            masked: (0..num_tokens).collect(),
            visible: Vec::new(),
            num_tokens,
        }
    }

    pub fn ratio(&self) -> f64 {
        self.masked.len() as f64 / self.num_tokens as f64
    }
}

pub fn masked_count(num_tokens: usize, ratio: f64) -> usize {
    (ratio * num_tokens as f64 + 1e-9).floor() as usize
}

/// Uniformly random subset of exactly `floor(r·N)` masked tokens.
pub fn sample_mask<R: Rng + ?Sized>(num_tokens: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!("mask ratio must lie in [0, 1), got {ratio}")));
    }
    let k = masked_count(num_tokens, ratio);
    let masked = rand::seq::index::sample(rng, num_tokens, k).into_vec();
    MaskPlan::from_masked(num_tokens, masked)
}

/// Mask ratio for `level`, interpolated linearly from `r_fine` at level 0 to
/// `r_coarse` at the coarsest level.
pub fn level_mask_ratio(level: usize, num_levels: usize, r_fine: f64, r_coarse: f64) -> f64 {
    if num_levels <= 1 {
        return r_fine;
    }
    let s = level.min(num_levels - 1) as f64 / (num_levels - 1) as f64;
    r_fine + (r_coarse - r_fine) * s
}

pub fn validate_ratios(r_fine: f64, r_coarse: f64) -> Result<()> {
    if !(0.0 <= r_coarse && r_coarse <= r_fine && r_fine < 1.0) {
        return Err(Error::config(format!(
            "mask ratios need 0 <= r_coarse <= r_fine < 1, got r_fine={r_fine}, r_coarse={r_coarse}"
        )));
    }
    Ok(())
}

/// Rows of a 2-D tensor, in the given order.
pub fn select_rows(t: &Tensor, index: &[usize]) -> Result<Tensor> {
    let c = t.cols();
    let rows = t.rows();
    let mut out = Vec::with_capacity(index.len() * c);
    for &i in index {
        if i >= rows {
            return Err(Error::contract(format!("row {i} out of range for {rows} rows")));
        }
        out.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![index.len(), c], out)
}

/// Visible and masked halves of a token batch. Either half is `None` when
/// its index set is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitTokens {
    pub visible: Option<Tensor>,
    pub masked: Option<Tensor>,
}

fn gather_batch(tokens: &Tensor, index: &[usize]) -> Option<Tensor> {
    if index.is_empty() {
        return None;
    }
    let &[b, n, d] = tokens.shape() else { unreachable!() };
    let src = tokens.data();
    let mut out = Vec::with_capacity(b * index.len() * d);
    for bi in 0..b {
        for &i in index {
            let s = (bi * n + i) * d;
            out.extend_from_slice(&src[s..s + d]);
        }
    }
    Some(Tensor::new(vec![b, index.len(), d], out).expect("gathered sizes agree"))
}

pub fn split(tokens: &TokenBatch, plan: &MaskPlan) -> Result<SplitTokens> {
    if plan.num_tokens != tokens.num_tokens() {
        return Err(Error::contract(format!(
            "mask plan covers {} tokens, batch has {}",
            plan.num_tokens,
            tokens.num_tokens()
        )));
    }
    if plan.masked.iter().chain(&plan.visible).any(|&i| i >= plan.num_tokens) {
        return Err(Error::contract("mask plan index out of range"));
    }
    Ok(SplitTokens {
        visible: gather_batch(&tokens.tokens, &plan.visible),
        masked: gather_batch(&tokens.tokens, &plan.masked),
    })
}

/// Inverse of [`split`]: place both halves back at their grid positions.
pub fn scatter(parts: &SplitTokens, plan: &MaskPlan, template: &TokenBatch) -> Result<TokenBatch> {
    let (b, n, d) = (template.batch(), plan.num_tokens, template.token_dim());
    let mut out = vec![0.0; b * n * d];
    for (part, index) in [(&parts.visible, &plan.visible), (&parts.masked, &plan.masked)] {
        match part {
            None if index.is_empty() => {}
            Some(t) if t.shape() == [b, index.len(), d] => {
                let src = t.data();
                for bi in 0..b {
                    for (k, &i) in index.iter().enumerate() {
                        let s = (bi * index.len() + k) * d;
                        let o = (bi * n + i) * d;
                        out[o..o + d].copy_from_slice(&src[s..s + d]);
                    }
                }
            }
            _ => return Err(Error::contract("split parts do not match the mask plan")),
        }
    }
    Ok(TokenBatch {
        tokens: Tensor::new(vec![b, n, d], out)?,
        ..template.clone()
    })
}
