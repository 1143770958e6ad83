use rand::Rng;

use super::DenoiserConfig;
use crate::error::{Error, Result};
use crate::rng::standard_normal;
use crate::tensor::{Parameter, Tape, Tensor, Var};

/// Rows of the token-type embedding table.
pub(crate) mod token_type {
    pub const NOISY: usize = 0;
    pub const VISIBLE: usize = 1;
    pub const LEVEL: usize = 2;
    pub const COARSE: usize = 3;
    pub const COUNT: usize = 4;
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct EncoderBlock {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct DecoderBlock {
    pub ada_w: usize,
    pub ada_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

/// Index of every parameter group inside [`DenoiserParams`].
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub time_w1: usize,
    pub time_b1: usize,
    pub time_w2: usize,
    pub time_b2: usize,
    pub level_table: usize,
    pub type_table: usize,
    pub embed_noisy: usize,
    pub embed_source: usize,
    pub embed_coarse: usize,
    pub embed_bias: usize,
    pub enc_in_w: usize,
    pub enc_in_b: usize,
    pub encoder: Vec<EncoderBlock>,
    pub enc_norm_gain: usize,
    pub enc_norm_bias: usize,
    pub enc_to_dec_w: usize,
    pub enc_to_dec_b: usize,
    pub decoder: Vec<DecoderBlock>,
    pub final_ada_w: usize,
    pub final_ada_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub skip_w: Option<usize>,
}

enum Init {
    Zeros,
    Ones,
    /// Normal with std sqrt(2 / (fan_in + fan_out)).
    Xavier,
    Normal(f64),
}

struct Builder<'r, R: Rng + ?Sized> {
    params: Vec<Parameter>,
    rng: &'r mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let len: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
            Init::Xavier => {
                let std = (2.0 / (shape[0] + shape[shape.len() - 1]) as f64).sqrt();
                (0..len).map(|_| std * standard_normal(self.rng)).collect()
            }
            Init::Normal(std) => (0..len).map(|_| std * standard_normal(self.rng)).collect(),
        };
        let value = Tensor::new(shape.to_vec(), data).expect("builder shapes are positive");
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }
}

/// All learnable weights of the encoder and the denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    params: Vec<Parameter>,
    pub(crate) layout: Layout,
}

impl DenoiserParams {
    /// Fresh weights. The adaptive-norm modulation and the output projection
    /// start at zero, so an untrained model predicts zero noise.
    pub fn init<R: Rng + ?Sized>(config: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let p = config.token_dim();
        let h = config.mlp_dim();
        let mut b = Builder {
            params: Vec::new(),
            rng,
        };
        let time_w1 = b.add("time.w1".into(), &[config.time_embed_dim, d], Init::Xavier);
        let time_b1 = b.add("time.b1".into(), &[d], Init::Zeros);
        let time_w2 = b.add("time.w2".into(), &[d, d], Init::Xavier);
        let time_b2 = b.add("time.b2".into(), &[d], Init::Zeros);
        let level_table = b.add("embed.level".into(), &[config.max_levels, d], Init::Normal(0.02));
        let type_table = b.add("embed.type".into(), &[token_type::COUNT, d], Init::Normal(0.02));
        let embed_noisy = b.add("embed.noisy".into(), &[p, d], Init::Xavier);
        let embed_source = b.add("embed.source".into(), &[p, d], Init::Xavier);
        let embed_coarse = b.add("embed.coarse".into(), &[p, d], Init::Xavier);
        let embed_bias = b.add("embed.bias".into(), &[d], Init::Zeros);
        let enc_in_w = b.add("encoder.in.w".into(), &[p, d], Init::Xavier);
        let enc_in_b = b.add("encoder.in.b".into(), &[d], Init::Zeros);
        let encoder = (0..config.num_encoder_blocks)
            .map(|i| EncoderBlock {
                ln1_gain: b.add(format!("encoder.{i}.ln1.gain"), &[d], Init::Ones),
                ln1_bias: b.add(format!("encoder.{i}.ln1.bias"), &[d], Init::Zeros),
                qkv_w: b.add(format!("encoder.{i}.qkv.w"), &[d, 3 * d], Init::Xavier),
                qkv_b: b.add(format!("encoder.{i}.qkv.b"), &[3 * d], Init::Zeros),
                proj_w: b.add(format!("encoder.{i}.proj.w"), &[d, d], Init::Xavier),
                proj_b: b.add(format!("encoder.{i}.proj.b"), &[d], Init::Zeros),
                ln2_gain: b.add(format!("encoder.{i}.ln2.gain"), &[d], Init::Ones),
                ln2_bias: b.add(format!("encoder.{i}.ln2.bias"), &[d], Init::Zeros),
                fc1_w: b.add(format!("encoder.{i}.fc1.w"), &[d, h], Init::Xavier),
                fc1_b: b.add(format!("encoder.{i}.fc1.b"), &[h], Init::Zeros),
                fc2_w: b.add(format!("encoder.{i}.fc2.w"), &[h, d], Init::Xavier),
                fc2_b: b.add(format!("encoder.{i}.fc2.b"), &[d], Init::Zeros),
            })
            .collect();
        let enc_norm_gain = b.add("encoder.norm.gain".into(), &[d], Init::Ones);
        let enc_norm_bias = b.add("encoder.norm.bias".into(), &[d], Init::Zeros);
        let enc_to_dec_w = b.add("encoder.to_decoder.w".into(), &[d, d], Init::Xavier);
        let enc_to_dec_b = b.add("encoder.to_decoder.b".into(), &[d], Init::Zeros);
        let decoder = (0..config.num_decoder_blocks)
            .map(|i| DecoderBlock {
                ada_w: b.add(format!("decoder.{i}.ada.w"), &[d, 6 * d], Init::Zeros),
                ada_b: b.add(format!("decoder.{i}.ada.b"), &[6 * d], Init::Zeros),
                qkv_w: b.add(format!("decoder.{i}.qkv.w"), &[d, 3 * d], Init::Xavier),
                qkv_b: b.add(format!("decoder.{i}.qkv.b"), &[3 * d], Init::Zeros),
                proj_w: b.add(format!("decoder.{i}.proj.w"), &[d, d], Init::Xavier),
                proj_b: b.add(format!("decoder.{i}.proj.b"), &[d], Init::Zeros),
                fc1_w: b.add(format!("decoder.{i}.fc1.w"), &[d, h], Init::Xavier),
                fc1_b: b.add(format!("decoder.{i}.fc1.b"), &[h], Init::Zeros),
                fc2_w: b.add(format!("decoder.{i}.fc2.w"), &[h, d], Init::Xavier),
                fc2_b: b.add(format!("decoder.{i}.fc2.b"), &[d], Init::Zeros),
            })
            .collect();
        let final_ada_w = b.add("final.ada.w".into(), &[d, 2 * d], Init::Zeros);
        let final_ada_b = b.add("final.ada.b".into(), &[2 * d], Init::Zeros);
        let out_w = b.add("final.out.w".into(), &[d, p], Init::Zeros);
        let out_b = b.add("final.out.b".into(), &[p], Init::Zeros);
        let skip_w = config
            .input_skip
            .then(|| b.add("final.skip.w".into(), &[p, p], Init::Zeros));
        let layout = Layout {
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            level_table,
            type_table,
            embed_noisy,
            embed_source,
            embed_coarse,
            embed_bias,
            enc_in_w,
            enc_in_b,
            encoder,
            enc_norm_gain,
            enc_norm_bias,
            enc_to_dec_w,
            enc_to_dec_b,
            decoder,
            final_ada_w,
            final_ada_b,
            out_w,
            out_b,
            skip_w,
        };
        Ok(Self {
            params: b.params,
            layout,
        })
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Overwrite every weight from a flat buffer produced by
    /// [`DenoiserParams::flatten`].
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.count() {
            return Err(Error::Corrupt(format!(
                "parameter payload has {} values, model needs {}",
                flat.len(),
                self.count()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Register every parameter on `tape` as a trainable leaf.
    pub fn register<'p>(&'p self, tape: &mut Tape<'p>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(&p.value)).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Some(vec![0.0; p.value.len()]);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Number of scalar weights implied by `config`.
pub fn parameter_count(config: &DenoiserConfig) -> usize {
    let d = config.embed_dim;
    let p = config.token_dim();
    let h = config.mlp_dim();
    let attn = d * 3 * d + 3 * d + d * d + d;
    let mlp = d * h + h + h * d + d;
    let time = config.time_embed_dim * d + d + d * d + d;
    let tables = config.max_levels * d + token_type::COUNT * d;
    let embed = 3 * p * d + d;
    let enc_in = p * d + d;
    let enc_block = 4 * d + attn + mlp;
    let enc_out = 2 * d + d * d + d;
    let dec_block = d * 6 * d + 6 * d + attn + mlp;
    let fin = d * 2 * d + 2 * d + d * p + p + if config.input_skip { p * p } else { 0 };
    time + tables
        + embed
        + enc_in
        + config.num_encoder_blocks * enc_block
        + enc_out
        + config.num_decoder_blocks * dec_block
        + fin
}
