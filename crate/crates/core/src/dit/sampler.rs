//! Rectified-flow sampling over the vertically stacked region layout.
//!
//! Noise sits at `t = 1` and data at `t = 0`; the model predicts the
//! velocity `x₁ − x₀` and the sampler integrates it with Euler steps on a
//! linear schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::DitModel;
use super::output::Manifest;
use super::patch::unpatchify;
use crate::cscc::{fuse_conditioning, FusedConditioning};
use crate::dit::DitVars;
use crate::error::{Error, Result};
use crate::layout::RegionLayout;
use crate::regional::{base_pass_on_tape, fuse_latents_on_tape, regional_pass_on_tape, BaseInputs, RegionalInputs};
use crate::tensor::{self, GradTape, Tensor, Var};
use crate::text::{
    build_encoder, encode_recipe_joint, encode_steps_independent, format_prompt, RecipeSpec, TextEncoder,
};

/// Noisy latent tokens for all regions at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    /// `N·L × patch_dim`, grouped by region.
    pub tokens: Tensor,
    pub t: f64,
    pub layout: RegionLayout,
}

impl LatentSequence {
    pub fn new(tokens: Tensor, t: f64, layout: RegionLayout) -> Result<Self> {
        if tokens.rows() != layout.total_tokens() {
            return Err(Error::dim("latent sequence", tokens.shape(), &[layout.total_tokens()]));
        }
        if !tokens.is_finite() {
            return Err(Error::Parameter("latent tokens must be finite".into()));
        }
        Ok(Self { tokens, t, layout })
    }

    /// Tokens of region `n`.
    pub fn region(&self, n: usize) -> Result<Tensor> {
        let counts = self.layout.token_counts();
        let len = *counts
            .get(n)
            .ok_or_else(|| Error::InvalidLayout(format!("no region {n}")))?;
        tensor::slice_rows(&self.tokens, self.layout.token_offset(n), len)
    }
}

/// Position in the linear schedule plus the seeded noise source.
#[derive(Clone, Debug)]
pub struct SamplerState {
    step: usize,
    schedule: Vec<f64>,
    rng: ChaCha8Rng,
}

impl SamplerState {
    /// `t_k = 1 − k/T` for `k = 0..=T`.
    pub fn new(steps: usize, seed: u64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("sampler needs at least one step".into()));
        }
        let schedule = (0..=steps).map(|k| 1.0 - k as f64 / steps as f64).collect();
        Ok(Self {
            step: 0,
            schedule,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// All times including the terminal `0`.
    pub fn schedule(&self) -> &[f64] {
        &self.schedule
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn steps(&self) -> usize {
        self.schedule.len() - 1
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.steps()
    }

    pub fn current_time(&self) -> f64 {
        self.schedule[self.step.min(self.steps())]
    }

    pub fn next_time(&self) -> f64 {
        self.schedule[(self.step + 1).min(self.steps())]
    }

    pub fn advance(&mut self) {
        self.step = (self.step + 1).min(self.steps());
    }

    /// Standard normal noise from the state's generator.
    pub fn noise(&mut self, rows: usize, cols: usize) -> Tensor {
        Tensor::randn(&[rows, cols], 1.0, &mut self.rng)
    }
}

/// Text-side inputs of both passes, computed once per generation.
#[derive(Clone, Debug)]
pub struct PreparedPrompt {
    /// The recipe after `[step-n]` tagging.
    pub recipe: RecipeSpec,
    pub layout: RegionLayout,
    pub conditioning: FusedConditioning,
    pub regional: RegionalInputs,
    pub base: BaseInputs,
}

impl PreparedPrompt {
    /// Encodes with the encoder named by the model configuration.
    pub fn new(model: &DitModel, recipe: &RecipeSpec) -> Result<Self> {
        let cfg = &model.config;
        let encoder = build_encoder(cfg.text_encoder, cfg.hidden, cfg.text_seed);
        Self::with_encoder(model, recipe, encoder.as_ref())
    }

    pub fn with_encoder(model: &DitModel, recipe: &RecipeSpec, encoder: &dyn TextEncoder) -> Result<Self> {
        recipe.validate()?;
        let cfg = &model.config;
        let tagged = format_prompt(recipe);
        let independent = encode_steps_independent(&tagged, encoder)?;
        let (joint, boundaries) = encode_recipe_joint(&tagged, encoder)?;
        let conditioning = if cfg.cscc {
            fuse_conditioning(&independent, &joint, &boundaries, cfg.lambda, encoder.backend_id())?
        } else {
            FusedConditioning::passthrough(independent, encoder.backend_id())
        };
        Self::from_parts(model, tagged, conditioning, joint.tokens)
    }

    /// Builds pass inputs from already-encoded step and recipe tokens.
    pub fn from_parts(
        model: &DitModel,
        recipe: RecipeSpec,
        conditioning: FusedConditioning,
        recipe_tokens: Tensor,
    ) -> Result<Self> {
        let cfg = &model.config;
        let layout = cfg.layout(conditioning.blocks.len())?;
        let regional = RegionalInputs::new(
            conditioning.step_tokens(),
            &layout,
            model.rotation_table(),
            cfg.regional_rope,
            cfg.regional_mask,
        )?;
        let base = BaseInputs::new(recipe_tokens, &layout, model.rotation_table(), cfg.base_rope)?;
        Ok(Self {
            recipe,
            layout,
            conditioning,
            regional,
            base,
        })
    }
}

/// Which passes contribute at a sampler step.
fn passes(model: &DitModel, step: usize) -> (bool, bool) {
    let alpha = model.config.alpha;
    if alpha == 0.0 || !model.config.fusion.active(step) {
        (true, false)
    } else if alpha == 1.0 {
        (false, true)
    } else {
        (true, true)
    }
}

/// Fused velocity `α·v_base + (1 − α)·v_region` recorded on a tape.
pub fn predict_velocity_on_tape(
    model: &DitModel,
    tape: &mut GradTape,
    vars: &DitVars,
    prompt: &PreparedPrompt,
    z: Var,
    t: f64,
    step: usize,
) -> Result<Var> {
    let (regional, base) = passes(model, step);
    let v_region = if regional {
        let text = tape.leaf(prompt.regional.text()?);
        Some(regional_pass_on_tape(model, tape, vars, text, z, t, &prompt.regional)?)
    } else {
        None
    };
    let v_base = if base {
        let text = tape.leaf(prompt.base.recipe_tokens.clone());
        Some(base_pass_on_tape(model, tape, vars, text, z, t, &prompt.base)?)
    } else {
        None
    };
    match (v_base, v_region) {
        (Some(b), Some(r)) => fuse_latents_on_tape(tape, b, r, model.config.alpha),
        (Some(v), None) | (None, Some(v)) => Ok(v),
        (None, None) => unreachable!("at least one pass runs"),
    }
}

/// Fused velocity for plain tensors.
pub fn predict_velocity(model: &DitModel, prompt: &PreparedPrompt, z: &Tensor, t: f64, step: usize) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let vars = model.bind(&mut tape);
    let zv = tape.leaf(z.clone());
    let v = predict_velocity_on_tape(model, &mut tape, &vars, prompt, zv, t, step)?;
    Ok(tape.value(v).clone())
}

/// `z + (t_next − t) · v`.
pub fn euler_update(z: &Tensor, v: &Tensor, dt: f64) -> Result<Tensor> {
    if z.shape() != v.shape() {
        return Err(Error::dim("euler_update", z.shape(), v.shape()));
    }
    let data = z.data().iter().zip(v.data()).map(|(a, b)| a + dt * b).collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// One sampler step from `z.t` to `t_next`.
pub fn denoise_step(
    model: &DitModel,
    prompt: &PreparedPrompt,
    z: &LatentSequence,
    t_next: f64,
    step: usize,
) -> Result<LatentSequence> {
    let v = predict_velocity(model, prompt, &z.tokens, z.t, step)?;
    let tokens = euler_update(&z.tokens, &v, t_next - z.t)?;
    if !tokens.is_finite() {
        return Err(Error::Parameter(format!(
            "non-finite latents after sampler step {step}"
        )));
    }
    Ok(LatentSequence {
        tokens,
        t: t_next,
        layout: z.layout.clone(),
    })
}

/// [`denoise_step`] on a tape, for gradient checks through the whole step.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step_on_tape(
    model: &DitModel,
    tape: &mut GradTape,
    vars: &DitVars,
    prompt: &PreparedPrompt,
    z: Var,
    t: f64,
    t_next: f64,
    step: usize,
) -> Result<Var> {
    let v = predict_velocity_on_tape(model, tape, vars, prompt, z, t, step)?;
    let dv = tape.scale(v, t_next - t)?;
    tape.add(z, dv)
}

/// Integrates `velocity` from `z` along `schedule` with Euler steps.
pub fn integrate(
    z: &Tensor,
    schedule: &[f64],
    mut velocity: impl FnMut(&Tensor, f64, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    let mut z = z.clone();
    for (k, w) in schedule.windows(2).enumerate() {
        let v = velocity(&z, w[0], k)?;
        z = euler_update(&z, &v, w[1] - w[0])?;
    }
    Ok(z)
}

/// Images and metadata of one generation.
#[derive(Clone, Debug)]
pub struct SampleResult {
    /// One `H × W × C` image per step, values nominally in `[-1, 1]`.
    pub images: Vec<Tensor>,
    /// Final latent tokens of the single joint trajectory.
    pub latents: LatentSequence,
    pub manifest: Manifest,
}

impl SampleResult {
    /// All regions stacked top to bottom.
    pub fn strip(&self) -> Result<Tensor> {
        let mut data = Vec::new();
        let (mut h, mut w, mut c) = (0, 0, 0);
        for img in &self.images {
            let s = img.shape();
            h += s[0];
            (w, c) = (s[1], s[2]);
            data.extend_from_slice(img.data());
        }
        Tensor::new(vec![h, w, c], data)
    }
}

/// Generates one image per step from a single latent trajectory.
pub fn sample(model: &DitModel, recipe: &RecipeSpec, seed: u64) -> Result<SampleResult> {
    let prompt = PreparedPrompt::new(model, recipe)?;
    sample_with(model, &prompt, recipe, seed)
}

/// [`sample`] with pre-encoded text inputs.
pub fn sample_with(model: &DitModel, prompt: &PreparedPrompt, recipe: &RecipeSpec, seed: u64) -> Result<SampleResult> {
    let cfg = &model.config;
    let mut state = SamplerState::new(cfg.sampler_steps, seed)?;
    let noise = state.noise(prompt.layout.total_tokens(), cfg.patch_dim());
    let mut z = LatentSequence::new(noise, state.current_time(), prompt.layout.clone())?;
    while !state.is_done() {
        z = denoise_step(model, prompt, &z, state.next_time(), state.step())?;
        state.advance();
    }
    let (gh, gw) = cfg.grid();
    let images = (0..prompt.layout.len())
        .map(|n| unpatchify(&z.region(n)?, gh, gw, cfg.patch_size, cfg.channels))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(recipe, seed, cfg, state.schedule().to_vec());
    Ok(SampleResult {
        images,
        latents: z,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::ModelConfig;

    fn recipe(n: usize) -> RecipeSpec {
        let colors = [
            "red", "green", "blue", "yellow", "purple", "orange", "white", "cyan", "pink", "gray",
        ];
        RecipeSpec::new(
            "toy",
            (0..n).map(|k| format!("add {} circle at top left", colors[k % colors.len()])),
        )
    }

    fn tiny_random() -> DitModel {
        DitModel::random(ModelConfig::tiny()).unwrap()
    }

    #[test]
    fn schedule_is_linear_and_decreasing() {
        let s = SamplerState::new(4, 0).unwrap();
        assert_eq!(s.schedule(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert!(SamplerState::new(0, 0).is_err());
    }

    #[test]
    fn oracle_velocity_recovers_data_in_one_step() {
        let mut st = SamplerState::new(1, 3).unwrap();
        let x0 = st.noise(6, 4);
        let x1 = st.noise(6, 4);
        let v = tensor::sub(&x1, &x0).unwrap();
        let out = integrate(&x1, st.schedule(), |_, _, _| Ok(v.clone())).unwrap();
        assert!(tensor::mse(&out, &x0).unwrap() < 1e-10);
    }

    #[test]
    fn image_count_matches_steps() {
        let model = tiny_random();
        for n in [2, 3, 5] {
            let r = sample(&model, &recipe(n), 1).unwrap();
            assert_eq!(r.images.len(), n);
            assert_eq!(r.images[0].shape(), &[4, 4, 1]);
            assert_eq!(r.strip().unwrap().shape(), &[4 * n, 4, 1]);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let model = tiny_random();
        let a = sample(&model, &recipe(3), 9).unwrap();
        let b = sample(&model, &recipe(3), 9).unwrap();
        assert!(a.latents.tokens.bit_eq(&b.latents.tokens));
        let c = sample(&model, &recipe(3), 10).unwrap();
        assert!(!a.latents.tokens.bit_eq(&c.latents.tokens));
    }

    #[test]
    fn alpha_zero_is_pure_regional() {
        let mut cfg = ModelConfig::tiny();
        cfg.alpha = 0.0;
        let model = DitModel::random(cfg).unwrap();
        let prompt = PreparedPrompt::new(&model, &recipe(2)).unwrap();
        let mut st = SamplerState::new(4, 0).unwrap();
        let z = st.noise(prompt.layout.total_tokens(), model.config.patch_dim());
        let fused = predict_velocity(&model, &prompt, &z, 1.0, 0).unwrap();
        let region = crate::regional::regional_pass(&model, &z, 1.0, &prompt.regional).unwrap();
        assert!(fused.bit_eq(&region));
    }

    #[test]
    fn fused_velocity_mixes_both_passes() {
        let model = tiny_random();
        let prompt = PreparedPrompt::new(&model, &recipe(2)).unwrap();
        let mut st = SamplerState::new(4, 0).unwrap();
        let z = st.noise(prompt.layout.total_tokens(), model.config.patch_dim());
        let fused = predict_velocity(&model, &prompt, &z, 0.5, 0).unwrap();
        let r = crate::regional::regional_pass(&model, &z, 0.5, &prompt.regional).unwrap();
        let b = crate::regional::base_pass(&model, &z, 0.5, &prompt.base).unwrap();
        let oracle: Vec<f64> = b.data().iter().zip(r.data()).map(|(b, r)| 0.1 * b + 0.9 * r).collect();
        for (x, y) in fused.data().iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn euler_step_matches_tape_version() {
        let model = tiny_random();
        let prompt = PreparedPrompt::new(&model, &recipe(2)).unwrap();
        let mut st = SamplerState::new(4, 0).unwrap();
        let z = LatentSequence::new(
            st.noise(prompt.layout.total_tokens(), model.config.patch_dim()),
            1.0,
            prompt.layout.clone(),
        )
        .unwrap();
        let plain = denoise_step(&model, &prompt, &z, 0.75, 0).unwrap();
        let mut tape = GradTape::new();
        let vars = model.bind(&mut tape);
        let zv = tape.leaf(z.tokens.clone());
        let out = denoise_step_on_tape(&model, &mut tape, &vars, &prompt, zv, 1.0, 0.75, 0).unwrap();
        assert!(tape.value(out).max_abs_diff(&plain.tokens) < 1e-12);
    }

    #[test]
    fn capacity_is_enforced() {
        let model = tiny_random();
        let err = sample(&model, &recipe(13), 0).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
    }
}
