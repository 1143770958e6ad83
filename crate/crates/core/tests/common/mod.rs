//! Helpers shared by the integration test targets.

#![allow(dead_code)]

pub mod criteria;

use pyrdiff::cgr::KernelSpec;
use pyrdiff::data::{DatasetSpec, PairedSample, Split};
use pyrdiff::denoiser::{forward_on_tape, predict_noise, DenoiserConfig, DenoiserParams};
use pyrdiff::diffusion::{Conditioning, DiffusionStepInput, VisibleTokens};
use pyrdiff::pipeline::{loss_and_grads, TrainConfig};
use pyrdiff::rng::{self, Rng};
use pyrdiff::tensor::{Tape, Tensor, Var};
use rand::Rng as _;

/// One random instance of an op under test: input tensors plus a closure
/// that applies the op to their tape vars.
pub struct OpCase {
    pub inputs: Vec<Tensor>,
    pub apply: Box<dyn for<'a> Fn(&mut Tape<'a>, &[Var]) -> Var>,
}

pub type OpBuilder = fn(&mut Rng) -> OpCase;

fn dim(r: &mut Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

fn randn(r: &mut Rng, shape: &[usize]) -> Tensor {
    rng::normal_tensor(shape, r)
}

fn case(inputs: Vec<Tensor>, apply: impl for<'a> Fn(&mut Tape<'a>, &[Var]) -> Var + 'static) -> OpCase {
    OpCase { inputs, apply: Box::new(apply) }
}

/// Every differentiable tape op with a random-instance generator.
pub fn op_builders() -> Vec<(&'static str, OpBuilder)> {
    vec![
        ("matmul", |r| {
            let (m, k, n) = (dim(r, 1, 6), dim(r, 1, 6), dim(r, 1, 6));
            case(vec![randn(r, &[m, k]), randn(r, &[k, n])], |t, v| t.matmul(v[0], v[1]).unwrap())
        }),
        ("add", |r| {
            let s = [dim(r, 1, 5), dim(r, 1, 5)];
            case(vec![randn(r, &s), randn(r, &s)], |t, v| t.add(v[0], v[1]).unwrap())
        }),
        ("sub", |r| {
            let s = [dim(r, 1, 5), dim(r, 1, 5)];
            case(vec![randn(r, &s), randn(r, &s)], |t, v| t.sub(v[0], v[1]).unwrap())
        }),
        ("mul", |r| {
            let s = [dim(r, 1, 5), dim(r, 1, 5)];
            case(vec![randn(r, &s), randn(r, &s)], |t, v| t.mul(v[0], v[1]).unwrap())
        }),
        ("add_row", |r| {
            let (m, n) = (dim(r, 1, 5), dim(r, 1, 5));
            case(vec![randn(r, &[m, n]), randn(r, &[1, n])], |t, v| t.add_row(v[0], v[1]).unwrap())
        }),
        ("mul_row", |r| {
            let (m, n) = (dim(r, 1, 5), dim(r, 1, 5));
            case(vec![randn(r, &[m, n]), randn(r, &[1, n])], |t, v| t.mul_row(v[0], v[1]).unwrap())
        }),
        ("scale", |r| {
            let s: f64 = r.random_range(-2.0..2.0);
            case(vec![{ let s = [dim(r, 1, 4), dim(r, 1, 4)]; randn(r, &s) }], move |t, v| t.scale(v[0], s))
        }),
        ("add_scalar", |r| {
            let s: f64 = r.random_range(-2.0..2.0);
            case(vec![{ let s = [dim(r, 1, 4), dim(r, 1, 4)]; randn(r, &s) }], move |t, v| t.add_scalar(v[0], s))
        }),
        ("reshape", |r| {
            let (m, n) = (dim(r, 1, 4), dim(r, 1, 4));
            case(vec![randn(r, &[m, n])], move |t, v| t.reshape(v[0], &[n, m]).unwrap())
        }),
        ("transpose", |r| {
            case(vec![{ let s = [dim(r, 1, 5), dim(r, 1, 5)]; randn(r, &s) }], |t, v| t.transpose(v[0]).unwrap())
        }),
        ("concat_rows", |r| {
            let n = dim(r, 1, 4);
            case(
                vec![{ let s = [dim(r, 1, 3), n]; randn(r, &s) }, { let s = [dim(r, 1, 3), n]; randn(r, &s) }],
                |t, v| t.concat_rows(&[v[0], v[1], v[0]]).unwrap(),
            )
        }),
        ("concat_cols", |r| {
            let m = dim(r, 1, 4);
            case(
                vec![{ let s = [m, dim(r, 1, 3)]; randn(r, &s) }, { let s = [m, dim(r, 1, 3)]; randn(r, &s) }],
                |t, v| t.concat_cols(&[v[1], v[0]]).unwrap(),
            )
        }),
        ("gather_rows", |r| {
            let (m, n) = (dim(r, 1, 5), dim(r, 1, 4));
            // Duplicates exercise gradient accumulation.
            let index: Vec<usize> = (0..dim(r, 1, 7)).map(|_| r.random_range(0..m)).collect();
            case(vec![randn(r, &[m, n])], move |t, v| t.gather_rows(v[0], &index).unwrap())
        }),
        ("slice_cols", |r| {
            let n = dim(r, 2, 6);
            let start = r.random_range(0..n);
            let len = r.random_range(1..=n - start);
            case(vec![{ let s = [dim(r, 1, 4), n]; randn(r, &s) }], move |t, v| t.slice_cols(v[0], start, len).unwrap())
        }),
        ("sum", |r| case(vec![{ let s = [dim(r, 1, 4), dim(r, 1, 4)]; randn(r, &s) }], |t, v| t.sum(v[0]))),
        ("mean", |r| case(vec![{ let s = [dim(r, 1, 4), dim(r, 1, 4)]; randn(r, &s) }], |t, v| t.mean(v[0]))),
        ("gelu", |r| {
            let mut x = { let s = [dim(r, 1, 4), dim(r, 1, 4)]; randn(r, &s) };
            x.data_mut().iter_mut().for_each(|v| *v *= 2.0);
            case(vec![x], |t, v| t.gelu(v[0]))
        }),
        ("exp", |r| case(vec![{ let s = [dim(r, 1, 4), dim(r, 1, 4)]; randn(r, &s) }], |t, v| t.exp(v[0]))),
        ("softmax", |r| {
            let mut x = { let s = [dim(r, 1, 4), dim(r, 1, 6)]; randn(r, &s) };
            x.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            case(vec![x], |t, v| t.softmax(v[0]))
        }),
        ("normalize", |r| {
            case(vec![{ let s = [dim(r, 1, 4), dim(r, 3, 6)]; randn(r, &s) }], |t, v| t.normalize(v[0], 1e-5))
        }),
        ("layer_norm", |r| {
            let (m, n) = (dim(r, 1, 4), dim(r, 3, 6));
            case(vec![randn(r, &[m, n]), randn(r, &[1, n]), randn(r, &[1, n])], |t, v| {
                t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5).unwrap()
            })
        }),
        ("sq_dist", |r| {
            let d = dim(r, 1, 4);
            case(vec![{ let s = [dim(r, 1, 5), d]; randn(r, &s) }, { let s = [dim(r, 1, 5), d]; randn(r, &s) }], |t, v| {
                t.sq_dist(v[0], v[1]).unwrap()
            })
        }),
        ("rbf_mean", |r| {
            let d = dim(r, 1, 4);
            let bw = vec![r.random_range(0.5..1.5), r.random_range(1.5..4.0)];
            case(vec![{ let s = [dim(r, 1, 6), d]; randn(r, &s) }, { let s = [dim(r, 1, 6), d]; randn(r, &s) }], move |t, v| {
                let cross = t.rbf_mean(v[0], v[1], &bw).unwrap();
                let within = t.rbf_mean(v[0], v[0], &bw).unwrap();
                t.add(cross, within).unwrap()
            })
        }),
        ("mse", |r| {
            let s = [dim(r, 1, 5), dim(r, 1, 5)];
            case(vec![randn(r, &s), randn(r, &s)], |t, v| t.mse(v[0], v[1]).unwrap())
        }),
    ]
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both are
/// below `floor`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

fn projected(case: &OpCase, inputs: &[Tensor], weights: &[f64]) -> f64 {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let out = (case.apply)(&mut tape, &vars);
    tape.value(out).iter().zip(weights).map(|(a, b)| a * b).sum()
}

/// Largest relative error between the tape gradient and central finite
/// differences over `cases` random instances of one op. The op output is
/// contracted with a random cotangent so every Jacobian entry contributes.
pub fn check_op(build: OpBuilder, cases: usize, seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let case = build(&mut r);
        let mut tape = Tape::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t)).collect();
        let out = (case.apply)(&mut tape, &vars);
        let weights = rng::normal_vec(tape.value(out).len(), &mut r);
        let grads = tape.backward_from(vec![(out, weights.clone())]).unwrap();
        for (k, input) in case.inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], input.len());
            let mut numeric = vec![0.0; input.len()];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let mut plus = case.inputs.clone();
                plus[k].data_mut()[j] += h;
                let mut minus = case.inputs.clone();
                minus[k].data_mut()[j] -= h;
                *slot = (projected(&case, &plus, &weights) - projected(&case, &minus, &weights)) / (2.0 * h);
            }
            worst = worst.max(rel_err(&analytic, &numeric, 1e-8));
        }
    }
    worst
}

/// The desk-scale phantom dataset: 32 training and 8 test pairs at 64×64.
pub fn desk_dataset(seed: u64) -> (Vec<PairedSample>, Vec<PairedSample>) {
    split(DatasetSpec { count: 40, test_count: 8, seed, ..Default::default() })
}

pub fn split(spec: DatasetSpec) -> (Vec<PairedSample>, Vec<PairedSample>) {
    let all = spec.samples().expect("valid dataset spec");
    let (train, rest): (Vec<_>, Vec<_>) = all.into_iter().partition(|s| s.split == Split::Train);
    (train, rest.into_iter().filter(|s| s.split == Split::Test).collect())
}

/// Fresh weights plus small noise on every entry, so the zero-initialized
/// modulation and output layers carry gradient signal too.
pub fn randomized_params(config: &DenoiserConfig, seed: u64) -> DenoiserParams {
    let mut params = DenoiserParams::init(config, &mut rng::seeded(seed)).unwrap();
    let mut r = rng::seeded(seed ^ 0xA5A5);
    for p in params.parameters_mut() {
        for v in p.value.data_mut() {
            *v += 0.05 * rng::standard_normal(&mut r);
        }
    }
    params
}

/// A conditioning-complete denoiser input on a 3×3 grid with four visible
/// tokens.
pub fn denoiser_step(config: &DenoiserConfig, seed: u64) -> DiffusionStepInput {
    let p = config.token_dim();
    let mut r = rng::seeded(seed);
    DiffusionStepInput {
        x_t: rng::normal_tensor(&[5, p], &mut r),
        t: 11,
        cond: Conditioning {
            grid: (3, 3),
            level: 0,
            num_levels: 2,
            positions: vec![0, 3, 4, 6, 8],
            source: Some(rng::normal_tensor(&[5, p], &mut r)),
            coarse: Some(rng::normal_tensor(&[5, p], &mut r)),
            visible: Some(VisibleTokens {
                tokens: rng::normal_tensor(&[4, p], &mut r),
                positions: vec![1, 2, 5, 7],
            }),
        },
    }
}

/// Coordinates to probe: up to `per_tensor` random entries of every
/// parameter tensor.
fn probe_coords(params: &DenoiserParams, per_tensor: usize, r: &mut Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (k, p) in params.parameters().iter().enumerate() {
        for _ in 0..per_tensor.min(p.value.len()) {
            out.push((k, r.random_range(0..p.value.len())));
        }
    }
    out
}

fn central_diff(
    params: &DenoiserParams,
    (k, j): (usize, usize),
    h: f64,
    f: &dyn Fn(&DenoiserParams) -> f64,
) -> f64 {
    let mut plus = params.clone();
    plus.parameters_mut()[k].value.data_mut()[j] += h;
    let mut minus = params.clone();
    minus.parameters_mut()[k].value.data_mut()[j] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative error of the full denoiser gradient (encoder included) against
/// central differences on sampled coordinates of every parameter tensor.
pub fn denoiser_grad_err(seed: u64) -> f64 {
    let config = DenoiserConfig::tiny();
    let params = randomized_params(&config, seed);
    let step = denoiser_step(&config, seed + 1);
    let mut r = rng::seeded(seed + 2);
    let weights = rng::normal_vec(step.x_t.len(), &mut r);

    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = forward_on_tape(&mut tape, &vars, &params, &config, &step).unwrap();
    let grads = tape.backward_from(vec![(out, weights.clone())]).unwrap();

    let f = |p: &DenoiserParams| -> f64 {
        let e = predict_noise(p, &config, &step).unwrap();
        e.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let coords = probe_coords(&params, 4, &mut r);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for &(k, j) in &coords {
        analytic.push(grads.get_or_zeros(vars[k], params.parameters()[k].value.len())[j]);
        numeric.push(central_diff(&params, (k, j), 1e-5, &f));
    }
    rel_err(&analytic, &numeric, 1e-8)
}

/// Relative error of the combined training loss gradient (noise loss plus
/// the regularizer with fixed bandwidths) on a two-level toy problem.
pub fn training_loss_grad_err(seed: u64) -> f64 {
    let config = TrainConfig {
        num_levels: 2,
        timesteps: 20,
        batch_size: 3,
        lambda: 1.0,
        kernel: KernelSpec::Fixed(vec![1.0, 3.0]),
        denoiser: DenoiserConfig { embed_dim: 16, num_heads: 2, patch_size: 4, ..DenoiserConfig::tiny() },
        ..Default::default()
    };
    let data = DatasetSpec { count: 3, height: 16, width: 16, test_count: 0, seed, ..Default::default() }
        .samples()
        .unwrap();
    let batch: Vec<&PairedSample> = data.iter().collect();
    let sched = config.schedule().unwrap();
    let params = randomized_params(&config.denoiser, seed);
    let (losses, grads) = loss_and_grads(&batch, &params, &config, &sched, 3).unwrap();
    assert!(losses.cgr.iter().all(|&c| c > 0.0), "regularizer inactive: {:?}", losses.cgr);

    let f = |p: &DenoiserParams| loss_and_grads(&batch, p, &config, &sched, 3).unwrap().0.combined;
    let mut r = rng::seeded(seed + 5);
    let coords = probe_coords(&params, 3, &mut r);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for &(k, j) in &coords {
        analytic.push(grads[k][j]);
        numeric.push(central_diff(&params, (k, j), 1e-5, &f));
    }
    rel_err(&analytic, &numeric, 1e-8)
}
