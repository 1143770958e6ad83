//! Visible-patch encoder and the conditional noise-prediction transformer.
//!
//! The decoder sequence is `[level token, noisy tokens, encoded visible
//! tokens]`. Each noisy token embeds its own patch together with the source
//! patch and the upsampled coarser reconstruction at the same position. The
//! timestep and level drive adaptive layer norms in every decoder block.

mod config;
mod params;

pub use config::DenoiserConfig;
pub use params::{parameter_count, DenoiserParams};

use params::{token_type, DecoderBlock, EncoderBlock, Layout};

use crate::diffusion::{DiffusionStepInput, VisibleTokens};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;

/// Sinusoidal features of a (possibly fractional) timestep: `dim / 2` sines
/// followed by `dim / 2` cosines with geometric frequencies.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

/// Fixed 2-D sin-cos features for patch positions. Coordinates are the
/// normalized patch centers, so the same image location gets the same
/// features at every pyramid level.
pub fn position_features(grid: (usize, usize), positions: &[usize], dim: usize) -> Tensor {
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(positions.len() * dim);
    for &pos in positions {
        let u = ((pos / grid.1) as f64 + 0.5) / grid.0 as f64;
        let v = ((pos % grid.1) as f64 + 0.5) / grid.1 as f64;
        for coord in [u, v] {
            for k in 0..quarter {
                let freq = std::f64::consts::PI * 64f64.powf(k as f64 / quarter.max(2) as f64);
                out.push((coord * freq).sin());
            }
            for k in 0..quarter {
                let freq = std::f64::consts::PI * 64f64.powf(k as f64 / quarter.max(2) as f64);
                out.push((coord * freq).cos());
            }
        }
    }
    Tensor::new(vec![positions.len(), dim], out).expect("non-empty positions")
}

fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Multi-head self-attention over the rows of `x`.
fn attention(
    tape: &mut Tape<'_>,
    x: Var,
    qkv_w: Var,
    qkv_b: Var,
    proj_w: Var,
    proj_b: Var,
    config: &DenoiserConfig,
) -> Result<Var> {
    let d = config.embed_dim;
    let dh = config.head_dim();
    let qkv = linear(tape, x, qkv_w, qkv_b)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let q = tape.slice_cols(qkv, h * dh, dh)?;
        let k = tape.slice_cols(qkv, d + h * dh, dh)?;
        let v = tape.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax(scores);
        heads.push(tape.matmul(weights, v)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    linear(tape, merged, proj_w, proj_b)
}

fn mlp(tape: &mut Tape<'_>, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = linear(tape, x, w1, b1)?;
    let h = tape.gelu(h);
    linear(tape, h, w2, b2)
}

/// `normalize(x) ⊙ (1 + scale) + shift`.
fn modulate(tape: &mut Tape<'_>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.normalize(x, LN_EPS);
    let s = tape.add_scalar(scale, 1.0);
    let y = tape.mul_row(n, s)?;
    tape.add_row(y, shift)
}

fn type_row(tape: &mut Tape<'_>, vars: &[Var], layout: &Layout, kind: usize) -> Result<Var> {
    tape.gather_rows(vars[layout.type_table], &[kind])
}

fn encoder_block(
    tape: &mut Tape<'_>,
    vars: &[Var],
    blk: &EncoderBlock,
    h: Var,
    config: &DenoiserConfig,
) -> Result<Var> {
    let a = tape.layer_norm(h, Some(vars[blk.ln1_gain]), Some(vars[blk.ln1_bias]), LN_EPS)?;
    let a = attention(
        tape,
        a,
        vars[blk.qkv_w],
        vars[blk.qkv_b],
        vars[blk.proj_w],
        vars[blk.proj_b],
        config,
    )?;
    let h = tape.add(h, a)?;
    let m = tape.layer_norm(h, Some(vars[blk.ln2_gain]), Some(vars[blk.ln2_bias]), LN_EPS)?;
    let m = mlp(tape, m, vars[blk.fc1_w], vars[blk.fc1_b], vars[blk.fc2_w], vars[blk.fc2_b])?;
    tape.add(h, m)
}

fn decoder_block(
    tape: &mut Tape<'_>,
    vars: &[Var],
    blk: &DecoderBlock,
    h: Var,
    cond: Var,
    config: &DenoiserConfig,
) -> Result<Var> {
    let d = config.embed_dim;
    let m = linear(tape, cond, vars[blk.ada_w], vars[blk.ada_b])?;
    let chunk = |tape: &mut Tape<'_>, i: usize| tape.slice_cols(m, i * d, d);
    let (shift1, scale1, gate1) = (chunk(tape, 0)?, chunk(tape, 1)?, chunk(tape, 2)?);
    let (shift2, scale2, gate2) = (chunk(tape, 3)?, chunk(tape, 4)?, chunk(tape, 5)?);

    let a = modulate(tape, h, shift1, scale1)?;
    let a = attention(
        tape,
        a,
        vars[blk.qkv_w],
        vars[blk.qkv_b],
        vars[blk.proj_w],
        vars[blk.proj_b],
        config,
    )?;
    let a = tape.mul_row(a, gate1)?;
    let h = tape.add(h, a)?;
    let f = modulate(tape, h, shift2, scale2)?;
    let f = mlp(tape, f, vars[blk.fc1_w], vars[blk.fc1_b], vars[blk.fc2_w], vars[blk.fc2_b])?;
    let f = tape.mul_row(f, gate2)?;
    tape.add(h, f)
}

fn check_positions(positions: &[usize], rows: usize, grid: (usize, usize), what: &str) -> Result<()> {
    if positions.len() != rows {
        return Err(Error::contract(format!(
            "{what}: {} positions for {rows} tokens",
            positions.len()
        )));
    }
    let n = grid.0 * grid.1;
    if let Some(&bad) = positions.iter().find(|&&p| p >= n) {
        return Err(Error::contract(format!(
            "{what}: position {bad} outside the {}x{} patch grid",
            grid.0, grid.1
        )));
    }
    Ok(())
}

fn check_tokens(t: &Tensor, rows: usize, p: usize, what: &str) -> Result<()> {
    if t.shape() != [rows, p] {
        return Err(Error::shape(
            "denoiser",
            format!("{what} tokens {:?}, expected [{rows}, {p}]", t.shape()),
        ));
    }
    Ok(())
}

fn validate_visible(v: &VisibleTokens, grid: (usize, usize), p: usize) -> Result<()> {
    if v.tokens.shape().len() != 2 || v.tokens.cols() != p {
        return Err(Error::shape(
            "encoder",
            format!("visible tokens {:?}, expected [N_v, {p}]", v.tokens.shape()),
        ));
    }
    check_positions(&v.positions, v.tokens.rows(), grid, "visible")
}

/// Check one denoiser call against `config`.
pub fn validate_step(step: &DiffusionStepInput, config: &DenoiserConfig) -> Result<()> {
    let p = config.token_dim();
    let c = &step.cond;
    if step.x_t.shape().len() != 2 || step.x_t.cols() != p {
        return Err(Error::shape(
            "denoiser",
            format!("noisy tokens {:?}, expected [N_m, {p}]", step.x_t.shape()),
        ));
    }
    let n_m = step.x_t.rows();
    if step.t == 0 {
        return Err(Error::contract("timestep must be at least 1"));
    }
    if c.grid.0 * c.grid.1 > config.max_tokens {
        return Err(Error::config(format!(
            "{}x{} patch grid exceeds max_tokens {}",
            c.grid.0, c.grid.1, config.max_tokens
        )));
    }
    if c.num_levels == 0 || c.level >= c.num_levels || c.level >= config.max_levels {
        return Err(Error::config(format!(
            "level {} invalid for {} pyramid levels (model supports {})",
            c.level, c.num_levels, config.max_levels
        )));
    }
    check_positions(&c.positions, n_m, c.grid, "noisy")?;
    let source = c
        .source
        .as_ref()
        .ok_or_else(|| Error::contract("missing conditioning stream: source"))?;
    check_tokens(source, n_m, p, "source")?;
    match &c.coarse {
        Some(coarse) => check_tokens(coarse, n_m, p, "coarse")?,
        None if c.level + 1 < c.num_levels => {
            return Err(Error::contract(format!(
                "missing conditioning stream: coarse (required at level {} of {})",
                c.level, c.num_levels
            )))
        }
        None => {}
    }
    if let Some(v) = &c.visible {
        validate_visible(v, c.grid, p)?;
    }
    Ok(())
}

/// Encoder pass over visible tokens on an existing tape; returns the
/// decoder-ready `N_v × D` embeddings.
pub(crate) fn encode_on_tape(
    tape: &mut Tape<'_>,
    vars: &[Var],
    layout: &Layout,
    config: &DenoiserConfig,
    visible: &VisibleTokens,
    grid: (usize, usize),
) -> Result<Var> {
    let pos = tape.constant(position_features(grid, &visible.positions, config.embed_dim));
    let x = tape.constant(visible.tokens.clone());
    let h = linear(tape, x, vars[layout.enc_in_w], vars[layout.enc_in_b])?;
    let mut h = tape.add(h, pos)?;
    for blk in &layout.encoder {
        h = encoder_block(tape, vars, blk, h, config)?;
    }
    let h = tape.layer_norm(
        h,
        Some(vars[layout.enc_norm_gain]),
        Some(vars[layout.enc_norm_bias]),
        LN_EPS,
    )?;
    let h = linear(tape, h, vars[layout.enc_to_dec_w], vars[layout.enc_to_dec_b])?;
    let h = tape.add(h, pos)?;
    let ty = type_row(tape, vars, layout, token_type::VISIBLE)?;
    tape.add_row(h, ty)
}

/// Encode visible target tokens (`N_v × P`) into `N_v × D` embeddings.
pub fn encode_visible(
    params: &DenoiserParams,
    config: &DenoiserConfig,
    visible: &VisibleTokens,
    grid: (usize, usize),
) -> Result<Tensor> {
    config.validate()?;
    validate_visible(visible, grid, config.token_dim())?;
    let mut tape = Tape::inference();
    let vars = params.register(&mut tape);
    let out = encode_on_tape(&mut tape, &vars, &params.layout, config, visible, grid)?;
    Ok(tape.tensor(out))
}

/// Full forward pass for one element; returns the `N_m × P` noise
/// prediction.
pub fn forward_on_tape(
    tape: &mut Tape<'_>,
    vars: &[Var],
    params: &DenoiserParams,
    config: &DenoiserConfig,
    step: &DiffusionStepInput,
) -> Result<Var> {
    validate_step(step, config)?;
    let layout = &params.layout;
    let cond = &step.cond;
    let n_m = step.x_t.rows();

    let temb = Tensor::new(
        vec![1, config.time_embed_dim],
        timestep_embedding(step.t as f64, config.time_embed_dim),
    )?;
    let temb = tape.constant(temb);
    let c = linear(tape, temb, vars[layout.time_w1], vars[layout.time_b1])?;
    let c = tape.gelu(c);
    let c = linear(tape, c, vars[layout.time_w2], vars[layout.time_b2])?;
    let level_row = tape.gather_rows(vars[layout.level_table], &[cond.level])?;
    let c = tape.add(c, level_row)?;
    let c_act = tape.gelu(c);

    let x = tape.constant(step.x_t.clone());
    let src = tape.constant(cond.source.clone().expect("validated"));
    let mut tokens = tape.matmul(x, vars[layout.embed_noisy])?;
    let s = tape.matmul(src, vars[layout.embed_source])?;
    tokens = tape.add(tokens, s)?;
    if let Some(coarse) = &cond.coarse {
        let cv = tape.constant(coarse.clone());
        let e = tape.matmul(cv, vars[layout.embed_coarse])?;
        tokens = tape.add(tokens, e)?;
        let ty = type_row(tape, vars, layout, token_type::COARSE)?;
        tokens = tape.add_row(tokens, ty)?;
    }
    tokens = tape.add_row(tokens, vars[layout.embed_bias])?;
    let pos = tape.constant(position_features(cond.grid, &cond.positions, config.embed_dim));
    tokens = tape.add(tokens, pos)?;
    let ty = type_row(tape, vars, layout, token_type::NOISY)?;
    tokens = tape.add_row(tokens, ty)?;

    let ty = type_row(tape, vars, layout, token_type::LEVEL)?;
    let level_token = tape.add(level_row, ty)?;

    let mut parts = vec![level_token, tokens];
    if let Some(v) = &cond.visible {
        if v.tokens.rows() > 0 {
            parts.push(encode_on_tape(tape, vars, layout, config, v, cond.grid)?);
        }
    }
    let mut h = tape.concat_rows(&parts)?;
    for blk in &layout.decoder {
        h = decoder_block(tape, vars, blk, h, c_act, config)?;
    }

    let d = config.embed_dim;
    let m = linear(tape, c_act, vars[layout.final_ada_w], vars[layout.final_ada_b])?;
    let shift = tape.slice_cols(m, 0, d)?;
    let scale = tape.slice_cols(m, d, d)?;
    let rows: Vec<usize> = (1..=n_m).collect();
    let h = tape.gather_rows(h, &rows)?;
    let h = modulate(tape, h, shift, scale)?;
    let out = linear(tape, h, vars[layout.out_w], vars[layout.out_b])?;
    match layout.skip_w {
        Some(w) => {
            let s = tape.matmul(x, vars[w])?;
            tape.add(out, s)
        }
        None => Ok(out),
    }
}

/// Noise prediction for one element without recording gradients.
pub fn predict_noise(
    params: &DenoiserParams,
    config: &DenoiserConfig,
    step: &DiffusionStepInput,
) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let vars = params.register(&mut tape);
    let out = forward_on_tape(&mut tape, &vars, params, config, step)?;
    Ok(tape.tensor(out))
}

/// Batched prediction, `B × N_m × P`. Every element must have the same
/// number of noisy tokens.
pub fn predict_noise_batch(
    params: &DenoiserParams,
    config: &DenoiserConfig,
    steps: &[DiffusionStepInput],
) -> Result<Tensor> {
    let first = steps
        .first()
        .ok_or_else(|| Error::contract("empty denoiser batch"))?;
    let shape = first.x_t.shape().to_vec();
    let mut data = Vec::with_capacity(steps.len() * first.x_t.len());
    for (i, step) in steps.iter().enumerate() {
        if step.x_t.shape() != shape.as_slice() {
            return Err(Error::shape(
                "denoiser batch",
                format!("element {i} has {:?}, element 0 has {shape:?}", step.x_t.shape()),
            ));
        }
        data.extend(predict_noise(params, config, step)?.into_data());
    }
    let mut out_shape = vec![steps.len()];
    out_shape.extend(shape);
    Tensor::new(out_shape, data)
}
