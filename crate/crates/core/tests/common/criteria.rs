//! Independent numerical oracles for the property-based acceptance checks.
//! Each check returns a verdict plus the measured quantities.

use pyrdiff::cgr::{mmd2, mmd2_value, KernelSpec};
use pyrdiff::diffusion::{make_schedule, p_sample, q_step, NoiseSchedule};
use pyrdiff::image::Image;
use pyrdiff::masking::{patchify, sample_mask, scatter, split, unpatchify, MaskPlan};
use pyrdiff::metrics::{paired_t_test, psnr, ssim};
use pyrdiff::pyramid::{decompose, downsample, level_dims, upsample};
use pyrdiff::rng;
use pyrdiff::tensor::{Tape, Tensor};
use rand::Rng as _;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{check_op, denoiser_grad_err, op_builders, rel_err};

#[derive(Debug)]
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }

    /// Conjunction of several sub-checks.
    pub fn all(parts: Vec<Check>) -> Self {
        let pass = parts.iter().all(|c| c.pass);
        let detail = parts.iter().map(|c| c.detail.as_str()).collect::<Vec<_>>().join("; ");
        Self { pass, detail }
    }
}

pub const OP_TOL: f64 = 1e-4;
pub const DENOISER_TOL: f64 = 1e-3;
pub const OP_CASES: usize = 50;

pub fn autodiff() -> Check {
    let mut worst = ("", 0.0f64);
    for (i, (name, build)) in op_builders().into_iter().enumerate() {
        let err = check_op(build, OP_CASES, 7_000 + i as u64);
        if !(err <= worst.1) {
            worst = (name, err);
        }
    }
    let den = denoiser_grad_err(11);
    Check::new(
        worst.1 < OP_TOL && den < DENOISER_TOL,
        format!(
            "{} ops x {OP_CASES} cases, worst {} {:.2e}; tiny denoiser {den:.2e}",
            op_builders().len(),
            worst.0,
            worst.1
        ),
    )
}

pub fn default_schedule() -> NoiseSchedule {
    make_schedule(1000, 1e-4, 0.02).unwrap()
}

/// Composed one-step transitions against the closed-form marginal, for a
/// point mass at `x0`: mean and variance within three standard errors.
pub fn forward_marginals(samples: usize, seed: u64) -> Check {
    let sched = default_schedule();
    let checkpoints = [1usize, 10, 100, 500, 1000];
    let mut r = rng::seeded(seed);
    let mut worst_z = 0.0f64;
    let mut checks = 0;
    for x0 in [0.6, -0.9] {
        let mut x = Tensor::full(&[samples], x0);
        let mut abar = 1.0;
        for t in 1..=1000 {
            let eps = rng::normal_tensor(&[samples], &mut r);
            x = q_step(&x, t, &eps, &sched).unwrap();
            abar *= 1.0 - sched.beta(t);
            if checkpoints.contains(&t) {
                let n = samples as f64;
                let mean = x.data().iter().sum::<f64>() / n;
                let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                let (m_true, v_true) = (abar.sqrt() * x0, 1.0 - abar);
                let z_mean = (mean - m_true).abs() / (v_true / n).sqrt();
                let z_var = (var - v_true).abs() / (v_true * (2.0 / (n - 1.0)).sqrt());
                worst_z = worst_z.max(z_mean).max(z_var);
                checks += 2;
            }
        }
    }
    Check::new(worst_z < 3.0, format!("{checks} moment checks at n={samples}, worst |z| {worst_z:.2}"))
}

pub fn terminal_alpha_bar() -> Check {
    let ab = default_schedule().alpha_bar(1000);
    Check::new(ab < 0.01, format!("abar_T = {ab:.3e}"))
}

/// Reverse chains on 1-D data `±0.5` (variance 0.25) driven by the exact
/// posterior-mean noise predictor.
pub fn reverse_chain(chains: usize, seed: u64) -> Check {
    let sched = default_schedule();
    let mut r = rng::seeded(seed);
    let mut x = rng::normal_tensor(&[chains], &mut r);
    for t in (1..=sched.steps()).rev() {
        let ab = sched.alpha_bar(t);
        let eps_hat: Vec<f64> = x
            .data()
            .iter()
            .map(|&xt| {
                let x0_hat = 0.5 * (0.5 * ab.sqrt() * xt / (1.0 - ab)).tanh();
                (xt - ab.sqrt() * x0_hat) / (1.0 - ab).sqrt()
            })
            .collect();
        let eps_hat = Tensor::new(vec![chains], eps_hat).unwrap();
        x = p_sample(&x, t, &eps_hat, &sched, &mut r).unwrap();
    }
    let n = chains as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Check::new(
        mean.abs() < 0.05 && (var - 0.25).abs() < 0.05,
        format!("{chains} chains: mean {mean:.4}, var {var:.4} (target 0.25)"),
    )
}

pub fn mask_cardinality() -> Check {
    let mut r = rng::seeded(31);
    let mut cases = 0;
    for n in [1usize, 2, 3, 7, 16, 63, 64, 100, 256, 1000] {
        for k in 0..20usize {
            let ratio = k as f64 / 20.0;
            let plan = sample_mask(n, ratio, &mut r).unwrap();
            let expect = k * n / 20;
            let mut all: Vec<usize> = plan.masked.iter().chain(&plan.visible).copied().collect();
            all.sort_unstable();
            if plan.masked.len() != expect || all != (0..n).collect::<Vec<_>>() {
                return Check::new(false, format!("N={n} r={ratio}: {} masked, expected {expect}", plan.masked.len()));
            }
            cases += 1;
        }
    }
    Check::new(true, format!("{cases} (N, r) cases exact"))
}

/// Pearson chi-square over all `C(n, k)` masked subsets.
pub fn mask_uniformity(n: usize, ratio: f64, draws: usize, seed: u64) -> (f64, f64) {
    let k = (ratio * n as f64).floor() as usize;
    let mut counts = std::collections::HashMap::<u64, usize>::new();
    let mut r = rng::seeded(seed);
    for _ in 0..draws {
        let plan = sample_mask(n, ratio, &mut r).unwrap();
        let key = plan.masked.iter().fold(0u64, |acc, &i| acc | (1 << i));
        *counts.entry(key).or_default() += 1;
    }
    let cells = binomial(n, k);
    let expected = draws as f64 / cells as f64;
    let observed_cells = counts.len();
    let stat = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum::<f64>()
        + (cells - observed_cells) as f64 * expected;
    let crit = ChiSquared::new((cells - 1) as f64).unwrap().inverse_cdf(0.99);
    (stat, crit)
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

pub fn mask_roundtrips() -> Check {
    let mut r = rng::seeded(41);
    for (b, c, h, w, p) in [(1, 1, 4, 4, 2), (2, 1, 8, 12, 4), (3, 2, 6, 9, 3), (1, 3, 16, 16, 8)] {
        let img = rng::normal_tensor(&[b, c, h, w], &mut r);
        let tokens = patchify(&img, p).unwrap();
        if unpatchify(&tokens).unwrap() != img {
            return Check::new(false, format!("patchify round trip failed for {b}x{c}x{h}x{w} p={p}"));
        }
        for ratio in [0.0, 0.25, 0.5, 0.9] {
            let plan = sample_mask(tokens.num_tokens(), ratio, &mut r).unwrap();
            let parts = split(&tokens, &plan).unwrap();
            if scatter(&parts, &plan, &tokens).unwrap() != tokens {
                return Check::new(false, format!("split/scatter round trip failed at r={ratio}"));
            }
        }
        let all = MaskPlan::all_masked(tokens.num_tokens());
        if scatter(&split(&tokens, &all).unwrap(), &all, &tokens).unwrap() != tokens {
            return Check::new(false, "all-masked round trip failed");
        }
    }
    Check::new(true, "patchify/unpatchify and split/scatter bit-exact")
}

pub fn masking() -> Check {
    let (stat_a, crit_a) = mask_uniformity(6, 0.5, 100_000, 51);
    let (stat_b, crit_b) = mask_uniformity(8, 0.25, 100_000, 52);
    Check::all(vec![
        mask_cardinality(),
        Check::new(
            stat_a < crit_a && stat_b < crit_b,
            format!("chi2 {stat_a:.1} < {crit_a:.1} (N=6), {stat_b:.1} < {crit_b:.1} (N=8)"),
        ),
        mask_roundtrips(),
    ])
}

pub fn pyramid_dims() -> Check {
    for d in [64usize, 128, 240, 512] {
        for (levels, p) in [(3usize, 4usize), (2, 8)] {
            let got = level_dims((d, d), 0.5, levels, p).unwrap();
            let want: Vec<_> = (0..levels).map(|n| (d >> n, d >> n)).collect();
            let img = Image::filled(d, d, 0.0);
            let pyr = decompose(&img, 0.5, levels, p).unwrap();
            if got != want || pyr.dims() != want {
                return Check::new(false, format!("{d}: {got:?} vs {want:?}"));
            }
        }
    }
    Check::new(true, "dims {64, 128, 240, 512} halve exactly per level")
}

pub fn pyramid_fixed_point() -> Check {
    let mut worst = 0.0f64;
    for c in [-0.7, 0.0, 0.3, 1.0] {
        let pyr = decompose(&Image::filled(32, 32, c), 0.5, 3, 4).unwrap();
        for level in pyr.levels() {
            worst = worst.max(level.pixels().iter().map(|v| (v - c).abs()).fold(0.0, f64::max));
        }
        let up = upsample(pyr.coarsest(), 4.0, (32, 32)).unwrap();
        worst = worst.max(up.pixels().iter().map(|v| (v - c).abs()).fold(0.0, f64::max));
    }
    Check::new(worst <= 1e-15, format!("constant image max deviation {worst:.1e}"))
}

pub fn pyramid_block_mean() -> Check {
    let mut r = rng::seeded(61);
    let mut worst = 0.0f64;
    for (h, w) in [(8, 8), (16, 24), (64, 64)] {
        let img = Image::from_fn(h, w, |_, _| 0.0);
        let mut img = img;
        img.pixels_mut().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
        let down = downsample(&img, 0.5).unwrap();
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                let block = img.get(2 * y, 2 * x) + img.get(2 * y, 2 * x + 1)
                    + img.get(2 * y + 1, 2 * x) + img.get(2 * y + 1, 2 * x + 1);
                worst = worst.max((down.get(y, x) - block / 4.0).abs());
            }
        }
    }
    Check::new(worst <= 1e-15, format!("block-mean max deviation {worst:.1e}"))
}

pub fn pyramid() -> Check {
    Check::all(vec![pyramid_dims(), pyramid_fixed_point(), pyramid_block_mean()])
}

fn shifted_normal(n: usize, d: usize, shift: f64, seed: u64) -> Tensor {
    let mut t = rng::normal_tensor(&[n, d], &mut rng::seeded(seed));
    t.data_mut().iter_mut().for_each(|v| *v += shift);
    t
}

pub fn mmd_nonnegative() -> Check {
    let mut r = rng::seeded(71);
    let mut min = f64::INFINITY;
    for trial in 0..200u64 {
        let d = r.random_range(1..=6);
        let (n, m) = (r.random_range(2..=30), r.random_range(2..=30));
        let shift = r.random_range(-1.0..1.0);
        let a = shifted_normal(n, d, 0.0, 1000 + trial);
        let b = shifted_normal(m, d, shift, 2000 + trial);
        min = min.min(mmd2_value(&a, &b, &KernelSpec::default()).unwrap());
    }
    Check::new(min >= -1e-12, format!("min over 200 random pairs {min:.2e}"))
}

pub fn mmd_identical() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let a = shifted_normal(40, 4, 0.3, 80 + seed);
        worst = worst.max(mmd2_value(&a, &a, &KernelSpec::default()).unwrap().abs());
    }
    Check::new(worst < 1e-12, format!("identical sets |mmd2| <= {worst:.1e}"))
}

/// Null replicates N(0, I) vs N(0, I) against shifted replicates
/// N(0, I) vs N(0.5·1, I), both at `n` samples per set in 4 dimensions.
pub fn mmd_separation(n: usize) -> Check {
    let spec = KernelSpec::default();
    let null: Vec<f64> = (0..20)
        .map(|i| mmd2_value(&shifted_normal(n, 4, 0.0, 300 + i), &shifted_normal(n, 4, 0.0, 400 + i), &spec).unwrap())
        .collect();
    let alt: Vec<f64> = (0..5)
        .map(|i| mmd2_value(&shifted_normal(n, 4, 0.0, 500 + i), &shifted_normal(n, 4, 0.5, 600 + i), &spec).unwrap())
        .collect();
    let mean = null.iter().sum::<f64>() / null.len() as f64;
    let sd = (null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (null.len() - 1) as f64).sqrt();
    let min_alt = alt.iter().copied().fold(f64::INFINITY, f64::min);
    let sigmas = (min_alt - mean) / sd;
    Check::new(sigmas > 5.0, format!("n={n}: weakest shifted replicate {sigmas:.1} sd above null"))
}

pub fn mmd_gradient() -> Check {
    let spec = KernelSpec::Fixed(vec![0.8, 1.6, 3.2]);
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let a = shifted_normal(7, 3, 0.2, 90 + seed);
        let b = shifted_normal(6, 3, -0.1, 95 + seed);
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&a), tape.param(&b));
        let m = mmd2(&mut tape, va, vb, &spec).unwrap();
        let grads = tape.backward(m).unwrap();
        let h = 1e-6;
        for (which, base) in [(0, &a), (1, &b)] {
            let analytic = grads.get_or_zeros(if which == 0 { va } else { vb }, base.len());
            let numeric: Vec<f64> = (0..base.len())
                .map(|j| {
                    let bump = |delta: f64| {
                        let mut t = base.clone();
                        t.data_mut()[j] += delta;
                        if which == 0 { mmd2_value(&t, &b, &spec) } else { mmd2_value(&a, &t, &spec) }.unwrap()
                    };
                    (bump(h) - bump(-h)) / (2.0 * h)
                })
                .collect();
            worst = worst.max(rel_err(&analytic, &numeric, 1e-8));
        }
    }
    Check::new(worst < 1e-4, format!("gradient rel err {worst:.2e}"))
}

pub fn mmd() -> Check {
    Check::all(vec![mmd_nonnegative(), mmd_identical(), mmd_separation(500), mmd_gradient()])
}

/// Direct windowed SSIM: 11×11 Gaussian weights (σ = 1.5), valid windows,
/// constants for the given data range.
pub fn naive_ssim(x: &Image, y: &Image, range: f64) -> f64 {
    let taps: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let (h, w) = x.dims();
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = taps[i] * taps[j] / (norm * norm);
                    let (a, b) = (x.get(y0 + i, x0 + j), y.get(y0 + i, x0 + j));
                    mx += wt * a;
                    my += wt * b;
                    sxx += wt * a * a;
                    syy += wt * b * b;
                    sxy += wt * a * b;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn random_image(h: usize, w: usize, r: &mut rng::Rng) -> Image {
    let mut img = Image::filled(h, w, 0.0);
    img.pixels_mut().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    img
}

pub fn metrics() -> Check {
    let mut r = rng::seeded(81);
    let mut self_ok = true;
    let mut worst_naive = 0.0f64;
    for (h, w) in [(11, 11), (16, 16), (20, 13), (32, 32)] {
        let x = random_image(h, w, &mut r);
        self_ok &= ssim(&x, &x, 2.0).unwrap() == 1.0;
        let mut y = x.clone();
        y.pixels_mut().iter_mut().for_each(|v| *v = (*v * 0.7 + r.random_range(-0.3..0.3)).clamp(-1.0, 1.0));
        worst_naive = worst_naive.max((ssim(&x, &y, 2.0).unwrap() - naive_ssim(&x, &y, 2.0)).abs());
    }
    let p = psnr(&Image::filled(8, 8, -0.5), &Image::filled(8, 8, 0.5), 2.0).unwrap();
    let diffs = [1.0, -1.0, 2.5, -2.5, 0.3, -0.3];
    let b = [0.2, 0.4, -0.1, 0.9, 0.0, 0.5];
    let a: Vec<f64> = b.iter().zip(diffs).map(|(x, d)| x + d).collect();
    let t = paired_t_test(&a, &b).unwrap();
    Check::all(vec![
        Check::new(self_ok, "SSIM(x, x) = 1 exactly"),
        Check::new((p - 6.0206).abs() < 1e-6, format!("PSNR at MSE 1, range 2: {p:.6} dB")),
        Check::new(worst_naive < 1e-10, format!("SSIM vs naive oracle {worst_naive:.1e}")),
        Check::new((t.p_value - 1.0).abs() < 1e-12, format!("antisymmetric t-test p = {}", t.p_value)),
    ])
}

pub fn diffusion() -> Check {
    Check::all(vec![forward_marginals(100_000, 21), terminal_alpha_bar(), reverse_chain(10_000, 22)])
}
