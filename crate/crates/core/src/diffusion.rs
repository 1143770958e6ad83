//! Variance schedule, forward noising, ancestral reverse step and the
//! noise-prediction loss.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, and `alpha_bar(t)` is the product of
//! `1 - beta_s` for `s ≤ t`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{select_rows, MaskPlan};
use crate::rng::standard_normal;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sqrt_alpha_bar: Vec<f64>,
    sqrt_one_minus_alpha_bar: Vec<f64>,
    // 1/sqrt(a_t) and beta_t / sqrt(1 - abar_t), the reverse-mean terms
    recip_sqrt_alpha: Vec<f64>,
    eps_coef: Vec<f64>,
}

/// Linear beta schedule from `beta_start` to `beta_end` over `steps`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("schedule needs at least one timestep"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar: Vec<f64> = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        steps,
        sqrt_alpha_bar: alpha_bar.iter().map(|a| a.sqrt()).collect(),
        sqrt_one_minus_alpha_bar: alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect(),
        recip_sqrt_alpha: alpha.iter().map(|a| 1.0 / a.sqrt()).collect(),
        eps_coef: beta
            .iter()
            .zip(&alpha_bar)
            .map(|(b, ab)| b / (1.0 - ab).sqrt())
            .collect(),
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    /// Linear schedule whose endpoints scale with `1000 / steps`, so the
    /// default `1e-4 → 0.02` range applies at 1000 steps and shorter chains
    /// still end close to pure noise.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one timestep"));
        }
        let s = 1000.0 / steps as f64;
        let end = (DEFAULT_BETA_END * s).min(0.999);
        let start = (DEFAULT_BETA_START * s).min(end);
        make_schedule(steps, start, end)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps {
            return Err(Error::contract(format!(
                "timestep {t} outside [1, {}]",
                self.steps
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Reverse-step standard deviation; fixed to `sqrt(beta_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.beta[t - 1].sqrt()
    }
}

fn check_same(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn affine(x: &Tensor, eps: &Tensor, a: f64, b: f64) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + b * e)
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape as input")
}

/// Closed-form forward marginal: `sqrt(abar_t)·x0 + sqrt(1 - abar_t)·eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same(x0, eps, "q_sample")?;
    let i = sched.idx(t)?;
    Ok(affine(
        x0,
        eps,
        sched.sqrt_alpha_bar[i],
        sched.sqrt_one_minus_alpha_bar[i],
    ))
}

/// One Markov transition: `sqrt(1 - beta_t)·x_prev + sqrt(beta_t)·eps`.
pub fn q_step(x_prev: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same(x_prev, eps, "q_step")?;
    let i = sched.idx(t)?;
    Ok(affine(x_prev, eps, sched.alpha[i].sqrt(), sched.beta[i].sqrt()))
}

/// Reverse-process mean for a predicted noise.
pub fn posterior_mean(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same(x_t, eps_hat, "p_sample")?;
    let i = sched.idx(t)?;
    let (r, c) = (sched.recip_sqrt_alpha[i], sched.eps_coef[i]);
    Ok(affine(x_t, eps_hat, r, -r * c))
}

/// Ancestral step `x_t → x_{t-1}`: the reverse mean plus `sqrt(beta_t)·z`,
/// with no noise added on the final step `t = 1`.
pub fn p_sample<R: Rng + ?Sized>(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let mut mean = posterior_mean(x_t, t, eps_hat, sched)?;
    if t > 1 {
        let sigma = sched.sigma(t);
        for v in mean.data_mut() {
            *v += sigma * standard_normal(rng);
        }
    }
    Ok(mean)
}

/// Clean-signal estimate implied by a predicted noise:
/// `(x_t - sqrt(1 - abar_t)·eps_hat) / sqrt(abar_t)`.
pub fn predict_x0(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same(x_t, eps_hat, "predict_x0")?;
    let i = sched.idx(t)?;
    let r = 1.0 / sched.sqrt_alpha_bar[i];
    Ok(affine(x_t, eps_hat, r, -r * sched.sqrt_one_minus_alpha_bar[i]))
}

/// Mean of `q(x_{t-1} | x_t, x0)`. With `x0 = predict_x0(..)` this equals
/// [`posterior_mean`].
pub fn posterior_mean_from_x0(x_t: &Tensor, t: usize, x0: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same(x_t, x0, "posterior_mean_from_x0")?;
    let i = sched.idx(t)?;
    let abar_prev = if i == 0 { 1.0 } else { sched.alpha_bar[i - 1] };
    let denom = 1.0 - sched.alpha_bar[i];
    let c0 = abar_prev.sqrt() * sched.beta[i] / denom;
    let ct = sched.alpha[i].sqrt() * (1.0 - abar_prev) / denom;
    Ok(affine(x0, x_t, c0, ct))
}

/// Ancestral step that clamps the implied clean estimate to `[lo, hi]`
/// before forming the reverse mean. Keeps early high-noise steps from
/// pushing the chain outside the data range.
pub fn p_sample_clipped<R: Rng + ?Sized>(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    (lo, hi): (f64, f64),
    rng: &mut R,
) -> Result<Tensor> {
    let mut x0 = predict_x0(x_t, t, eps_hat, sched)?;
    x0.data_mut().iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    let mut mean = posterior_mean_from_x0(x_t, t, &x0, sched)?;
    if t > 1 {
        let sigma = sched.sigma(t);
        for v in mean.data_mut() {
            *v += sigma * standard_normal(rng);
        }
    }
    Ok(mean)
}

/// Noise rows at the masked positions of `plan`.
pub fn masked_noise(eps: &Tensor, plan: &MaskPlan) -> Result<Tensor> {
    if plan.masked.is_empty() {
        return Err(Error::contract(
            "noise loss needs at least one masked token",
        ));
    }
    if eps.rows() != plan.num_tokens {
        return Err(Error::contract(format!(
            "noise has {} tokens, mask plan covers {}",
            eps.rows(),
            plan.num_tokens
        )));
    }
    select_rows(eps, &plan.masked)
}

/// Mean squared error between the injected noise at masked positions and the
/// prediction `eps_hat` (one row per masked token).
pub fn loss_eps(tape: &mut Tape<'_>, eps: &Tensor, eps_hat: Var, plan: &MaskPlan) -> Result<Var> {
    let target = masked_noise(eps, plan)?;
    if tape.shape(eps_hat) != target.shape() {
        return Err(Error::contract(format!(
            "prediction {:?} does not match masked noise {:?}",
            tape.shape(eps_hat),
            target.shape()
        )));
    }
    let target = tape.constant(target);
    tape.mse(eps_hat, target)
}

/// Tokens of the region a training sample diffuses, together with the
/// visible context.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibleTokens {
    /// `N_v × P` visible target tokens.
    pub tokens: Tensor,
    /// Grid index of each visible token.
    pub positions: Vec<usize>,
}

/// Everything the denoiser is conditioned on besides the noisy tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// Patch grid of the current level.
    pub grid: (usize, usize),
    /// Pyramid level (0 = finest).
    pub level: usize,
    /// Depth of the pyramid the level belongs to.
    pub num_levels: usize,
    /// Grid index of each noisy token.
    pub positions: Vec<usize>,
    /// Source-modality tokens at the noisy positions.
    pub source: Option<Tensor>,
    /// Upsampled coarser reconstruction at the noisy positions; absent at the
    /// coarsest level.
    pub coarse: Option<Tensor>,
    /// Visible target context; present only during masked training.
    pub visible: Option<VisibleTokens>,
}

/// One denoiser call: noisy masked-region tokens at timestep `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionStepInput {
    pub x_t: Tensor,
    pub t: usize,
    pub cond: Conditioning,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn unclipped_x0_route_matches_eps_route() {
        let s = NoiseSchedule::scaled_linear(50).unwrap();
        let mut r = rng::seeded(3);
        let x = rng::normal_tensor(&[4, 5], &mut r);
        let e = rng::normal_tensor(&[4, 5], &mut r);
        for t in [1, 2, 25, 50] {
            let direct = posterior_mean(&x, t, &e, &s).unwrap();
            let x0 = predict_x0(&x, t, &e, &s).unwrap();
            let via = posterior_mean_from_x0(&x, t, &x0, &s).unwrap();
            for (a, b) in direct.data().iter().zip(via.data()) {
                assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()), "t={t}: {a} vs {b}");
            }
        }
        let wide = p_sample_clipped(&x, 1, &e, &s, (-1e9, 1e9), &mut rng::seeded(0)).unwrap();
        let x0 = predict_x0(&x, 1, &e, &s).unwrap();
        for (a, b) in wide.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 0.01);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        let one = make_schedule(1, 0.3, 0.3).unwrap();
        assert!((one.alpha_bar(1) - 0.7).abs() < 1e-15);
        assert!(make_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert_eq!(
            NoiseSchedule::scaled_linear(1000).unwrap(),
            make_schedule(1000, 1e-4, 0.02).unwrap()
        );
        for t in [50, 100, 250, 500] {
            assert!(NoiseSchedule::scaled_linear(t).unwrap().alpha_bar(t) < 0.01);
        }
    }

    #[test]
    fn forward_closed_form() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = Tensor::new(vec![3], vec![1.0, -0.5, 0.25]).unwrap();
        let zero = Tensor::zeros(&[3]);
        let xt = q_sample(&x0, 400, &zero, &s).unwrap();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert!((a - s.alpha_bar(400).sqrt() * b).abs() < 1e-15);
        }
        // abar = 0.25: single step of beta 0.75
        let s = make_schedule(1, 0.75, 0.75).unwrap();
        let xt = q_sample(&Tensor::scalar(1.0), 1, &Tensor::scalar(0.5), &s).unwrap();
        assert!((xt.data()[0] - 0.933_012_701_892_219_3).abs() < 1e-12);
        assert!(q_sample(&x0, 2, &zero, &s).is_err());
        assert!(q_sample(&x0, 1, &Tensor::zeros(&[2]), &s).is_err());
    }

    #[test]
    fn markov_step_edges() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let eps = Tensor::new(vec![2], vec![0.3, -1.2]).unwrap();
        let out = q_step(&Tensor::zeros(&[2]), 5, &eps, &s).unwrap();
        for (o, e) in out.data().iter().zip(eps.data()) {
            assert!((o - s.beta(5).sqrt() * e).abs() < 1e-15);
        }
        let x = Tensor::new(vec![2], vec![0.7, 0.1]).unwrap();
        let tiny = make_schedule(1, 1e-300, 1e-300).unwrap();
        let out = q_step(&x, 1, &Tensor::zeros(&[2]), &tiny).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn reverse_final_step_inverts_forward() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let mut r = rng::seeded(5);
        let x0 = rng::normal_tensor(&[4, 4], &mut r);
        let eps = rng::normal_tensor(&[4, 4], &mut r);
        let x1 = q_sample(&x0, 1, &eps, &s).unwrap();
        let out = p_sample(&x1, 1, &eps, &s, &mut r).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-6);
        // t = 1 is deterministic
        let again = p_sample(&x1, 1, &eps, &s, &mut rng::seeded(99)).unwrap();
        assert_eq!(out, again);
        assert!(p_sample(&x1, 0, &eps, &s, &mut r).is_err());
    }

    #[test]
    fn noise_loss_values() {
        let plan = MaskPlan::from_masked(3, vec![0, 2]).unwrap();
        let eps = Tensor::zeros(&[3, 2]);
        let mut tape = Tape::new();
        let hat = tape.variable(Tensor::full(&[2, 2], 0.5));
        let l = loss_eps(&mut tape, &eps, hat, &plan).unwrap();
        assert!((tape.scalar(l) - 0.25).abs() < 1e-15);

        let same = tape.constant(Tensor::zeros(&[2, 2]));
        let l = loss_eps(&mut tape, &eps, same, &plan).unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        let empty = MaskPlan::from_masked(3, vec![]).unwrap();
        assert!(loss_eps(&mut tape, &eps, hat, &empty).is_err());
    }
}
