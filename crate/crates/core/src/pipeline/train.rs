use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::cgr::mmd2;
use crate::data::{Checkpoint, LossRecord, PairedSample};
use crate::denoiser::{forward_on_tape, DenoiserParams};
use crate::diffusion::{q_sample, Conditioning, DiffusionStepInput, NoiseSchedule, VisibleTokens};
use crate::error::{Error, Result};
use crate::masking::{level_mask_ratio, masked_count, patchify_image, sample_mask, select_rows, MaskPlan};
use crate::pyramid::{decompose, upsample};
use crate::rng::{self, normal_tensor};
use crate::tensor::{AdamState, Tape, Tensor, Var};

const INIT_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;
const EPOCH_STREAM: u64 = 3;

/// Loss values of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    /// Noise-prediction loss summed over levels.
    pub loss_eps: f64,
    pub loss_eps_per_level: Vec<f64>,
    /// Unweighted regularizer per level, finest first.
    pub cgr: Vec<f64>,
    pub combined: f64,
}

/// One level of one training element, ready for the denoiser.
struct LevelItem {
    input: DiffusionStepInput,
    eps_masked: Tensor,
}

fn prepare_element(
    sample: &PairedSample,
    config: &TrainConfig,
    sched: &NoiseSchedule,
    rng: &mut rng::Rng,
) -> Result<Vec<LevelItem>> {
    let p = config.patch_size();
    let l = config.num_levels;
    sample.source.check_same_dims(&sample.target, "training pair")?;
    let target = decompose(&sample.target, config.alpha, l, p)?;
    let source = decompose(&sample.source, config.alpha, l, p)?;
    let mut items = Vec::with_capacity(l);
    for n in 0..l {
        let y = target.level(n);
        let (h, w) = y.dims();
        let grid = (h / p, w / p);
        let num_tokens = grid.0 * grid.1;

        let t = rng.random_range(1..=sched.steps());
        let x0 = patchify_image(y, p)?;
        let eps = normal_tensor(x0.shape(), rng);
        let x_t = q_sample(&x0, t, &eps, sched)?;
        let full = rng.random_bool(config.full_region_prob);
        let ratio = level_mask_ratio(n, l, config.r_fine, config.r_coarse);
        let plan = if full || masked_count(num_tokens, ratio) == 0 {
            MaskPlan::all_masked(num_tokens)
        } else {
            sample_mask(num_tokens, ratio, rng)?
        };

        let src = patchify_image(source.level(n), p)?;
        let coarse = if n + 1 < l {
            let up = upsample(target.level(n + 1), 1.0 / config.alpha, (h, w))?;
            Some(select_rows(&patchify_image(&up, p)?, &plan.masked)?)
        } else {
            None
        };
        let visible = (!plan.visible.is_empty()).then(|| -> Result<VisibleTokens> {
            let from = if config.denoiser.encode_clean_visible { &x0 } else { &x_t };
            Ok(VisibleTokens {
                tokens: select_rows(from, &plan.visible)?,
                positions: plan.visible.clone(),
            })
        });
        let visible = visible.transpose()?;
        items.push(LevelItem {
            input: DiffusionStepInput {
                x_t: select_rows(&x_t, &plan.masked)?,
                t,
                cond: Conditioning {
                    grid,
                    level: n,
                    num_levels: l,
                    positions: plan.masked.clone(),
                    source: Some(select_rows(&src, &plan.masked)?),
                    coarse,
                    visible,
                },
            },
            eps_masked: select_rows(&eps, &plan.masked)?,
        });
    }
    Ok(items)
}

fn non_finite(role: &str, step: u64) -> Error {
    Error::Numeric(format!("non-finite {role} at step {step}"))
}

/// Combined loss `Σ_level L_eps + lambda · Σ_level mmd²` of `batch` and its
/// gradient with respect to every parameter group.
///
/// Each element runs on its own tape. The loss head couples the elements
/// through the per-level regularizer, so it runs on a separate tape over
/// copies of the predictions and its gradients are pushed back into the
/// element tapes. Element gradients are summed in batch order.
pub fn loss_and_grads(
    batch: &[&PairedSample],
    params: &DenoiserParams,
    config: &TrainConfig,
    sched: &NoiseSchedule,
    step: u64,
) -> Result<(StepLosses, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::contract("training batch is empty"));
    }
    let items = batch
        .iter()
        .enumerate()
        .map(|(b, s)| {
            let mut r = rng::stream(config.seed, &[STEP_STREAM, step, b as u64]);
            prepare_element(s, config, sched, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    let levels = config.num_levels;
    let bsz = batch.len();

    let mut tapes = Vec::with_capacity(bsz);
    for elem in &items {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let mut outs = Vec::with_capacity(levels);
        for it in elem {
            outs.push(forward_on_tape(&mut tape, &vars, params, &config.denoiser, &it.input)?);
        }
        tapes.push((tape, vars, outs));
    }

    let mut head = Tape::new();
    let leaves: Vec<Vec<Var>> = tapes
        .iter()
        .map(|(tape, _, outs)| outs.iter().map(|&o| head.variable(tape.tensor(o))).collect())
        .collect();
    let mut eps_per_level = Vec::with_capacity(levels);
    let mut cgr_per_level = Vec::with_capacity(levels);
    for n in 0..levels {
        let mut level_loss: Option<Var> = None;
        for b in 0..bsz {
            let target = head.constant(items[b][n].eps_masked.clone());
            let m = head.mse(leaves[b][n], target)?;
            level_loss = Some(match level_loss {
                None => m,
                Some(acc) => head.add(acc, m)?,
            });
        }
        let level_loss = head.scale(level_loss.expect("batch is non-empty"), 1.0 / bsz as f64);
        eps_per_level.push(level_loss);

        let hats: Vec<Var> = (0..bsz).map(|b| leaves[b][n]).collect();
        let rows: usize = items.iter().map(|e| e[n].eps_masked.rows()).sum();
        // A level with a single masked token in the whole batch has no
        // distribution to compare and contributes nothing.
        let cgr = if rows >= 2 {
            let truth = head.constant(concat_rows(items.iter().map(|e| &e[n].eps_masked))?);
            let pooled = head.concat_rows(&hats)?;
            mmd2(&mut head, pooled, truth, &config.kernel)?
        } else {
            head.constant(Tensor::scalar(0.0))
        };
        cgr_per_level.push(cgr);
    }
    let mut eps_total = eps_per_level[0];
    let mut cgr_total = cgr_per_level[0];
    for n in 1..levels {
        eps_total = head.add(eps_total, eps_per_level[n])?;
        cgr_total = head.add(cgr_total, cgr_per_level[n])?;
    }
    let weighted = head.scale(cgr_total, config.lambda);
    let combined = head.add(eps_total, weighted)?;
    let losses = StepLosses {
        loss_eps: head.scalar(eps_total),
        loss_eps_per_level: eps_per_level.iter().map(|&v| head.scalar(v)).collect(),
        cgr: cgr_per_level.iter().map(|&v| head.scalar(v)).collect(),
        combined: head.scalar(combined),
    };
    if !losses.combined.is_finite() {
        return Err(non_finite("combined loss", step));
    }
    let head_grads = head.backward(combined)?;

    let mut grads: Vec<Vec<f64>> = params.parameters().iter().map(|p| vec![0.0; p.value.len()]).collect();
    for (b, (tape, vars, outs)) in tapes.iter().enumerate() {
        let seeds = outs
            .iter()
            .zip(&leaves[b])
            .map(|(&o, &leaf)| (o, head_grads.get_or_zeros(leaf, tape.value(o).len())))
            .collect();
        let g = tape.backward_from(seeds)?;
        for (acc, &v) in grads.iter_mut().zip(vars) {
            if let Some(gv) = g.get(v) {
                for (a, x) in acc.iter_mut().zip(gv) {
                    *a += x;
                }
            }
        }
    }
    for (p, g) in params.parameters().iter().zip(&grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(&format!("gradient of {}", p.name), step));
        }
    }
    Ok((losses, grads))
}

/// One optimizer step on `batch`: every pyramid level of every element
/// contributes to the single combined loss of [`loss_and_grads`]. Nothing
/// is updated if any part fails.
pub fn train_step(
    batch: &[&PairedSample],
    params: &mut DenoiserParams,
    adam: &mut AdamState,
    config: &TrainConfig,
    sched: &NoiseSchedule,
    step: u64,
) -> Result<StepLosses> {
    let (losses, grads) = loss_and_grads(batch, params, config, sched, step)?;
    let mut updated = params.clone();
    let mut next = adam.clone();
    for (p, g) in updated.parameters_mut().iter_mut().zip(grads) {
        p.grad = Some(g);
    }
    next.step(updated.parameters_mut())?;
    if !updated.is_finite() {
        return Err(non_finite("parameters after update", step));
    }
    *params = updated;
    *adam = next;
    Ok(losses)
}

fn concat_rows<'a>(parts: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for t in parts {
        rows += t.rows();
        cols = Some(t.cols());
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![rows, cols.unwrap_or(0)], data)
}

/// Parameters, optimizer and counters of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: DenoiserParams,
    pub adam: AdamState,
    pub step: u64,
    pub epoch: usize,
    pub history: Vec<LossRecord>,
    sched: NoiseSchedule,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, &[INIT_STREAM]);
        let params = DenoiserParams::init(&config.denoiser, &mut r)?;
        let adam = AdamState::for_params(params.parameters(), config.learning_rate);
        Ok(Self {
            sched: config.schedule()?,
            config,
            params,
            adam,
            step: 0,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(ck.train_config.clone())
            .map_err(|e| Error::Corrupt(format!("checkpoint training config: {e}")))?;
        if config.denoiser != ck.denoiser {
            return Err(Error::Corrupt("checkpoint architecture disagrees with its training config".into()));
        }
        let mut trainer = Trainer::new(config)?;
        trainer.params.load_flat(&ck.params)?;
        let sizes: Vec<usize> = trainer.params.parameters().iter().map(|p| p.value.len()).collect();
        if sizes != ck.group_sizes {
            return Err(Error::Corrupt("checkpoint parameter groups do not match the model".into()));
        }
        trainer.adam = ck.adam.clone();
        trainer.step = ck.step;
        trainer.epoch = ck.epoch;
        trainer.history = ck.loss_history.clone();
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            denoiser: self.config.denoiser.clone(),
            train_config: serde_json::to_value(&self.config)
                .map_err(|e| Error::config(format!("config not serializable: {e}")))?,
            params: self.params.flatten(),
            group_sizes: self.params.parameters().iter().map(|p| p.value.len()).collect(),
            adam: self.adam.clone(),
            seed: self.config.seed,
            step: self.step,
            epoch: self.epoch,
            loss_history: self.history.clone(),
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn train_step(&mut self, batch: &[&PairedSample]) -> Result<LossRecord> {
        let losses = train_step(
            batch,
            &mut self.params,
            &mut self.adam,
            &self.config,
            &self.sched,
            self.step,
        )?;
        self.step += 1;
        let record = LossRecord {
            epoch: self.epoch,
            step: self.step,
            loss_eps: losses.loss_eps,
            cgr: losses.cgr,
            combined: losses.combined,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// One pass over `train` in a seed-determined order.
    pub fn train_epoch(&mut self, train: &[PairedSample]) -> Result<Vec<LossRecord>> {
        if train.is_empty() {
            return Err(Error::contract("training split is empty"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(self.config.seed, &[EPOCH_STREAM, self.epoch as u64]));
        let mut records = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&PairedSample> = chunk.iter().map(|&i| &train[i]).collect();
            records.push(self.train_step(&batch)?);
        }
        self.epoch += 1;
        Ok(records)
    }
}
