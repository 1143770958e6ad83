use serde::{Deserialize, Serialize};

use super::{sample_hierarchical, SampleTrace, TrainConfig};
use crate::data::PairedSample;
use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{paired_t_test, psnr, ssim, ImageScore, MetricReport, TTest, UNIT_RANGE};
use crate::pyramid::resize_bilinear;
use crate::rng::derive_seed;

/// Scores of one synthesized image against its reference.
pub fn score(id: impl Into<String>, prediction: &Image, target: &Image) -> Result<ImageScore> {
    Ok(ImageScore {
        id: id.into(),
        psnr_db: psnr(target, prediction, UNIT_RANGE)?,
        ssim: ssim(target, prediction, UNIT_RANGE)?,
    })
}

/// PSNR of every level output against the full-resolution target, after
/// bilinear upsampling to the target size. Finest first.
pub fn level_psnr(trace: &SampleTrace, target: &Image) -> Result<Vec<f64>> {
    let (h, w) = target.dims();
    trace
        .levels
        .iter()
        .map(|img| {
            let up = if img.dims() == (h, w) { img.clone() } else { resize_bilinear(img, h, w) };
            psnr(target, &up, UNIT_RANGE)
        })
        .collect()
}

/// Model evaluation over one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Per image, finest first.
    pub level_psnr: Vec<Vec<f64>>,
    #[serde(skip)]
    pub traces: Vec<SampleTrace>,
}

/// Sample every pair in `samples` and score the finest output. Image `i` is
/// sampled with a seed derived from `seed` and `i`.
pub fn evaluate(
    samples: &[PairedSample],
    params: &DenoiserParams,
    config: &TrainConfig,
    seed: u64,
    task: &str,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Degenerate("evaluation split is empty".into()));
    }
    let mut scores = Vec::with_capacity(samples.len());
    let mut level_psnrs = Vec::with_capacity(samples.len());
    let mut traces = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let trace = sample_hierarchical(&s.source, params, config, derive_seed(seed, &[i as u64]))?;
        scores.push(score(s.id.clone(), trace.output(), &s.target)?);
        level_psnrs.push(level_psnr(&trace, &s.target)?);
        traces.push(trace);
    }
    Ok(Evaluation {
        report: MetricReport::from_scores(task, scores),
        level_psnr: level_psnrs,
        traces,
    })
}

/// Scores of the trivial baseline that returns the source image unchanged.
pub fn copy_source_report(samples: &[PairedSample], task: &str) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Degenerate("evaluation split is empty".into()));
    }
    let scores = samples
        .iter()
        .map(|s| score(s.id.clone(), &s.source, &s.target))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_scores(task, scores))
}

/// Paired t-test on per-image PSNR of two reports over the same images.
pub fn compare_psnr(a: &MetricReport, b: &MetricReport) -> Result<TTest> {
    if a.images.iter().map(|s| &s.id).ne(b.images.iter().map(|s| &s.id)) {
        return Err(Error::contract("reports cover different images"));
    }
    paired_t_test(&a.psnr_values(), &b.psnr_values())
}
