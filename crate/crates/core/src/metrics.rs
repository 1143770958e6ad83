//! PSNR, SSIM and the paired t-test.
//!
//! SSIM uses the fixed reference configuration: an 11×11 Gaussian window with
//! σ = 1.5, K1 = 0.01, K2 = 0.03, evaluated only where the window fits inside
//! the image, averaged over all window positions.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Data range of images normalized to `[-1, 1]`.
pub const UNIT_RANGE: f64 = 2.0;

pub fn mse(reference: &Image, test: &Image) -> Result<f64> {
    reference.check_same_dims(test, "mse")?;
    let n = reference.pixels().len() as f64;
    Ok(reference
        .pixels()
        .iter()
        .zip(test.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr(reference: &Image, test: &Image, data_range: f64) -> Result<f64> {
    if data_range <= 0.0 {
        return Err(Error::config(format!("data range must be positive, got {data_range}")));
    }
    let e = mse(reference, test)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / e).log10())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - c;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of a row-major `h×w` buffer.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let row = &src[y * w + x..y * w + x + k];
            horiz[y * ow + x] = row.iter().zip(taps).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += horiz[(y + i) * ow + x] * t;
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Local SSIM at every window position, as an image of
/// `(H - 10) × (W - 10)` values.
pub fn ssim_map(reference: &Image, test: &Image, data_range: f64) -> Result<Image> {
    reference.check_same_dims(test, "ssim")?;
    let (h, w) = reference.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    if data_range <= 0.0 {
        return Err(Error::config(format!("data range must be positive, got {data_range}")));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let x = reference.pixels();
    let y = test.pixels();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, h, w, &taps);
    let mu_y = filter_valid(y, h, w, &taps);
    let e_xx = filter_valid(&xx, h, w, &taps);
    let e_yy = filter_valid(&yy, h, w, &taps);
    let e_xy = filter_valid(&xy, h, w, &taps);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let values = (0..mu_x.len())
        .map(|i| local_ssim(mu_x[i], mu_y[i], e_xx[i], e_yy[i], e_xy[i], c1, c2))
        .collect();
    Image::new(h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1, values)
}

/// SSIM of one window from its weighted first and second moments.
pub fn local_ssim(mu_x: f64, mu_y: f64, e_xx: f64, e_yy: f64, e_xy: f64, c1: f64, c2: f64) -> f64 {
    let var_x = e_xx - mu_x * mu_x;
    let var_y = e_yy - mu_y * mu_y;
    let cov = e_xy - mu_x * mu_y;
    let num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2);
    let den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2);
    num / den
}

pub fn ssim(reference: &Image, test: &Image, data_range: f64) -> Result<f64> {
    Ok(ssim_map(reference, test, data_range)?.mean())
}

/// Result of a two-sided paired t-test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t_statistic: f64,
    pub p_value: f64,
    pub degrees_of_freedom: usize,
}

/// Paired t-test on `a - b` with `n - 1` degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("paired t-test needs at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite paired difference".into()));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if var <= 0.0 {
        return Err(Error::Degenerate(
            "paired differences have zero variance".into(),
        ));
    }
    let t = mean / (var / n as f64).sqrt();
    let df = (n - 1) as f64;
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0);
    Ok(TTest {
        t_statistic: t,
        p_value: p,
        degrees_of_freedom: n - 1,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-image scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Scores over an image set with summary statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub images: Vec<ImageScore>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

impl MetricReport {
    pub fn from_scores(task: impl Into<String>, images: Vec<ImageScore>) -> Self {
        let p: Vec<f64> = images.iter().map(|s| s.psnr_db).collect();
        let s: Vec<f64> = images.iter().map(|s| s.ssim).collect();
        let (psnr_mean, psnr_std) = mean_std(&p);
        let (ssim_mean, ssim_std) = mean_std(&s);
        Self {
            task: task.into(),
            images,
            psnr_mean,
            psnr_std,
            ssim_mean,
            ssim_std,
        }
    }

    pub fn psnr_values(&self) -> Vec<f64> {
        self.images.iter().map(|s| s.psnr_db).collect()
    }

    pub fn ssim_values(&self) -> Vec<f64> {
        self.images.iter().map(|s| s.ssim).collect()
    }

    /// `"mean ± std"` for PSNR in dB.
    pub fn psnr_cell(&self) -> String {
        format_mean_std(self.psnr_mean, self.psnr_std, 2)
    }

    /// `"mean ± std"` for SSIM in percent.
    pub fn ssim_cell(&self) -> String {
        format_mean_std(self.ssim_mean * 100.0, self.ssim_std * 100.0, 2)
    }
}

pub fn format_mean_std(mean: f64, std: f64, decimals: usize) -> String {
    if mean.is_infinite() {
        return if mean > 0.0 { "inf".into() } else { "-inf".into() };
    }
    format!("{mean:.decimals$} ± {std:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn noise_image(h: usize, w: usize, seed: u64) -> Image {
        let v = rng::normal_vec(h * w, &mut rng::seeded(seed));
        Image::new(h, w, v.into_iter().map(|x| (x * 0.4).clamp(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_hand_values() {
        let a = Image::filled(4, 4, 0.0);
        assert_eq!(psnr(&a, &a, 2.0).unwrap(), f64::INFINITY);
        let b = Image::filled(4, 4, 1.0);
        assert!((psnr(&a, &b, 2.0).unwrap() - 6.020_599_913_279_624).abs() < 1e-12);
        let c = Image::filled(4, 4, 0.1);
        assert!((psnr(&a, &c, 2.0).unwrap() - 26.020_599_913_279_625).abs() < 1e-9);
        assert!(psnr(&a, &Image::filled(3, 4, 0.0), 2.0).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = noise_image(24, 24, 1);
        assert_eq!(ssim(&a, &a, 2.0).unwrap(), 1.0);
        let checker = Image::from_fn(24, 24, |y, x| if (x + y) % 2 == 0 { 0.5 } else { -0.5 });
        let inverted = checker.map(|v| -v);
        assert!(ssim(&checker, &inverted, 2.0).unwrap() < -0.9);
        assert!(ssim(&Image::filled(10, 10, 0.0), &Image::filled(10, 10, 0.0), 2.0).is_err());
    }

    #[test]
    fn t_test_edges() {
        let t = paired_t_test(&[-1.0, 1.0, -1.0, 1.0], &[0.0; 4]).unwrap();
        assert_eq!(t.t_statistic, 0.0);
        assert_eq!(t.p_value, 1.0);
        let a = [1.0, 2.0, 3.0];
        assert!(matches!(paired_t_test(&a, &a), Err(Error::Degenerate(_))));
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn report_formatting() {
        let r = MetricReport::from_scores(
            "a→b",
            vec![
                ImageScore { id: "0".into(), psnr_db: 20.0, ssim: 0.9 },
                ImageScore { id: "1".into(), psnr_db: 22.0, ssim: 0.8 },
            ],
        );
        assert_eq!(r.psnr_cell(), "21.00 ± 1.41");
        assert_eq!(r.ssim_cell(), "85.00 ± 7.07");
    }
}
