//! Flow-matching training of the toy model on synthetic recipes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::SyntheticRecipe;
use super::model::{DitModel, DitParams};
use super::output::convert_channels;
use super::patch::patchify;
use super::sampler::{predict_velocity_on_tape, PreparedPrompt};
use crate::error::{Error, Result};
use crate::tensor::{self, GradTape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Emit a [`LossPoint`] every this many steps (and on the last step).
    pub log_every: usize,
    pub seed: u64,
    /// Reuse one noise draw per example instead of fresh noise each step.
    pub fixed_noise: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 1e-3,
            batch_size: 1,
            log_every: 50,
            seed: 0,
            fixed_noise: false,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<LossPoint>,
    /// Loss on the fixed evaluation draw before the first update. In
    /// fixed-noise runs the draw reuses the training noise.
    pub initial_eval: f64,
    /// Loss on the same draw after the last update.
    pub final_eval: f64,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: DitParams,
    v: DitParams,
}

impl Adam {
    pub fn new(model: &DitModel, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: DitParams::zeros(&model.config),
            v: DitParams::zeros(&model.config),
        }
    }

    pub fn step(&mut self, params: &mut DitParams, grads: &DitParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let grads = grads.entries();
        let moments = self.m.entries_mut().into_iter().zip(self.v.entries_mut());
        for (((_, p), (_, g)), ((_, m), (_, v))) in params.entries_mut().into_iter().zip(grads).zip(moments) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Encoded prompt and clean latent tokens of one recipe.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub prompt: PreparedPrompt,
    /// `N·L × patch_dim` data tokens, region by region.
    pub x0: Tensor,
}

pub fn prepare_examples(model: &DitModel, dataset: &[SyntheticRecipe]) -> Result<Vec<TrainingExample>> {
    let cfg = &model.config;
    dataset
        .iter()
        .map(|s| {
            let prompt = PreparedPrompt::new(model, &s.recipe)?;
            let parts = s
                .images
                .iter()
                .map(|img| {
                    let shape = img.shape();
                    if shape.len() != 3 || shape[0] != cfg.region_height || shape[1] != cfg.region_width {
                        return Err(Error::dim(
                            "training image",
                            shape,
                            &[cfg.region_height, cfg.region_width],
                        ));
                    }
                    patchify(&convert_channels(img, cfg.channels)?, cfg.patch_size)
                })
                .collect::<Result<Vec<_>>>()?;
            let x0 = tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?;
            Ok(TrainingExample { prompt, x0 })
        })
        .collect()
}

/// Sampler step whose time is closest to `t`, so fusion schedules apply
/// during training as they do when sampling.
fn step_for_time(t: f64, steps: usize) -> usize {
    (((1.0 - t) * steps as f64).round() as usize).min(steps - 1)
}

/// `‖v̂(z_t, t) − (x₁ − x₀)‖²` averaged over elements, with parameter
/// gradients.
pub fn flow_matching_loss(
    model: &DitModel,
    example: &TrainingExample,
    noise: &Tensor,
    t: f64,
) -> Result<(f64, DitParams)> {
    let mut tape = GradTape::new();
    let vars = model.bind(&mut tape);
    let loss = loss_on_tape(model, &mut tape, &vars, example, noise, t)?;
    let value = tape.value(loss).item();
    let g = tape.gradient(loss)?;
    Ok((value, vars.map(&mut |_, v| g.wrt(*v))))
}

fn loss_on_tape(
    model: &DitModel,
    tape: &mut GradTape,
    vars: &super::DitVars,
    example: &TrainingExample,
    noise: &Tensor,
    t: f64,
) -> Result<tensor::Var> {
    let x0 = &example.x0;
    let zt: Vec<f64> = x0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    let target = tensor::sub(noise, x0)?;
    let z = tape.leaf(Tensor::new(x0.shape().to_vec(), zt)?);
    let step = step_for_time(t, model.config.sampler_steps);
    let v = predict_velocity_on_tape(model, tape, vars, &example.prompt, z, t, step)?;
    let target = tape.leaf(target);
    tape.mse(v, target)
}

/// Forward-only loss.
pub fn flow_matching_value(model: &DitModel, example: &TrainingExample, noise: &Tensor, t: f64) -> Result<f64> {
    let mut tape = GradTape::new();
    let vars = model.bind(&mut tape);
    let loss = loss_on_tape(model, &mut tape, &vars, example, noise, t)?;
    Ok(tape.value(loss).item())
}

fn example_rng(seed: u64, index: usize, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(index as u64);
    rng
}

/// Mean loss over all examples with one fixed `(t, noise)` draw each.
pub fn evaluation_loss(model: &DitModel, examples: &[TrainingExample], seed: u64) -> Result<f64> {
    evaluation_loss_with(model, examples, seed, None)
}

/// [`evaluation_loss`], optionally with caller-supplied noise per example
/// (the draws of a fixed-noise run).
pub fn evaluation_loss_with(
    model: &DitModel,
    examples: &[TrainingExample],
    seed: u64,
    noise: Option<&[Tensor]>,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Parameter("evaluation needs at least one example".into()));
    }
    let mut total = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let mut rng = example_rng(seed, i, 0xe7a1);
        let t = rng.random_range(0.02..0.98);
        let drawn = Tensor::randn(ex.x0.shape(), 1.0, &mut rng);
        let noise = noise.map_or(&drawn, |n| &n[i]);
        total += flow_matching_value(model, ex, noise, t)?;
    }
    Ok(total / examples.len() as f64)
}

pub fn train(model: &mut DitModel, dataset: &[SyntheticRecipe], opts: &TrainOptions) -> Result<TrainReport> {
    train_with(model, dataset, opts, |_| {})
}

/// [`train`] with a callback for every logged point.
pub fn train_with(
    model: &mut DitModel,
    dataset: &[SyntheticRecipe],
    opts: &TrainOptions,
    mut on_log: impl FnMut(&LossPoint),
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Parameter("training dataset is empty".into()));
    }
    if opts.batch_size == 0 || opts.log_every == 0 || opts.learning_rate <= 0.0 {
        return Err(Error::Parameter(
            "batch_size, log_every and learning_rate must be positive".into(),
        ));
    }
    let examples = prepare_examples(model, dataset)?;
    let fixed: Vec<Tensor> = if opts.fixed_noise {
        examples
            .iter()
            .enumerate()
            .map(|(i, ex)| Tensor::randn(ex.x0.shape(), 1.0, &mut example_rng(opts.seed, i, 0xf1ed)))
            .collect()
    } else {
        Vec::new()
    };
    let eval_noise = opts.fixed_noise.then_some(fixed.as_slice());
    let initial_eval = evaluation_loss_with(model, &examples, opts.seed, eval_noise)?;
    let mut adam = Adam::new(model, opts.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut log = Vec::new();
    for step in 0..opts.steps {
        let mut grads = DitParams::zeros(&model.config);
        let mut loss = 0.0;
        for _ in 0..opts.batch_size {
            let i = rng.random_range(0..examples.len());
            let t: f64 = rng.random_range(0.0..1.0);
            let noise = if opts.fixed_noise {
                fixed[i].clone()
            } else {
                Tensor::randn(examples[i].x0.shape(), 1.0, &mut rng)
            };
            let (l, g) = flow_matching_loss(model, &examples[i], &noise, t)?;
            loss += l / opts.batch_size as f64;
            for ((_, acc), (_, gi)) in grads.entries_mut().into_iter().zip(g.entries()) {
                for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += b / opts.batch_size as f64;
                }
            }
        }
        let norm = grads
            .entries()
            .iter()
            .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Training { step, loss });
        }
        if let Some(clip) = opts.clip_norm.filter(|&c| norm > c) {
            let s = clip / norm;
            for (_, g) in grads.entries_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        adam.step(&mut model.params, &grads);
        if step % opts.log_every == 0 || step + 1 == opts.steps {
            let point = LossPoint {
                step,
                loss,
                grad_norm: norm,
            };
            on_log(&point);
            log.push(point);
        }
    }
    let final_eval = evaluation_loss_with(model, &examples, opts.seed, eval_noise)?;
    Ok(TrainReport {
        log,
        initial_eval,
        final_eval,
    })
}
