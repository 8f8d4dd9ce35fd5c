use std::sync::Arc;

use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::params::Linear;
use crate::regional::{attention_on_tape, AttentionParams, JointSequence, StepMask};
use crate::rope::RotationTable;
use crate::tensor::{GradTape, PairRotation, Tensor, Var};

/// One transformer block: timestep-modulated pre-norm attention and MLP,
/// each added back through a gated residual.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = Tensor> {
    /// Conditioning row → (shift, scale, gate) for attention and MLP.
    pub modulation: Linear<T>,
    pub attention: AttentionParams<T>,
    pub mlp_in: Linear<T>,
    pub mlp_out: Linear<T>,
}

impl<T> BlockParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> BlockParams<U> {
        BlockParams {
            modulation: self.modulation.map(&format!("{prefix}.modulation"), f),
            attention: self.attention.map(&format!("{prefix}.attention"), f),
            mlp_in: self.mlp_in.map(&format!("{prefix}.mlp_in"), f),
            mlp_out: self.mlp_out.map(&format!("{prefix}.mlp_out"), f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.modulation.visit(&format!("{prefix}.modulation"), f);
        self.attention.visit(&format!("{prefix}.attention"), f);
        self.mlp_in.visit(&format!("{prefix}.mlp_in"), f);
        self.mlp_out.visit(&format!("{prefix}.mlp_out"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        self.modulation.visit_mut(&format!("{prefix}.modulation"), f);
        self.attention.visit_mut(&format!("{prefix}.attention"), f);
        self.mlp_in.visit_mut(&format!("{prefix}.mlp_in"), f);
        self.mlp_out.visit_mut(&format!("{prefix}.mlp_out"), f);
    }
}

impl BlockParams {
    pub fn zeros(d: usize, mlp_ratio: usize) -> Self {
        Self {
            modulation: Linear::zeros(d, 6 * d),
            attention: AttentionParams {
                qkv: Linear::zeros(d, 3 * d),
                out: Linear::zeros(d, d),
            },
            mlp_in: Linear::zeros(d, mlp_ratio * d),
            mlp_out: Linear::zeros(mlp_ratio * d, d),
        }
    }

    fn random<R: Rng + ?Sized>(d: usize, mlp_ratio: usize, modulation_gain: f64, rng: &mut R) -> Self {
        Self {
            modulation: Linear::init(d, 6 * d, modulation_gain, rng),
            attention: AttentionParams {
                qkv: Linear::init(d, 3 * d, 1.0, rng),
                out: Linear::init(d, d, 1.0, rng),
            },
            mlp_in: Linear::init(d, mlp_ratio * d, 1.0, rng),
            mlp_out: Linear::init(mlp_ratio * d, d, 1.0, rng),
        }
    }
}

/// All model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DitParams<T = Tensor> {
    pub patch_embed: Linear<T>,
    pub text_embed: Linear<T>,
    pub time_in: Linear<T>,
    pub time_out: Linear<T>,
    pub blocks: Vec<BlockParams<T>>,
    /// Conditioning row → (shift, scale) of the output norm.
    pub final_modulation: Linear<T>,
    pub final_proj: Linear<T>,
}

pub type DitVars = DitParams<Var>;

impl<T> DitParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> DitParams<U> {
        DitParams {
            patch_embed: self.patch_embed.map("patch_embed", f),
            text_embed: self.text_embed.map("text_embed", f),
            time_in: self.time_in.map("time_in", f),
            time_out: self.time_out.map("time_out", f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("blocks.{i}"), f))
                .collect(),
            final_modulation: self.final_modulation.map("final_modulation", f),
            final_proj: self.final_proj.map("final_proj", f),
        }
    }

    /// Visits every tensor with its dotted name, in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        self.patch_embed.visit("patch_embed", f);
        self.text_embed.visit("text_embed", f);
        self.time_in.visit("time_in", f);
        self.time_out.visit("time_out", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        self.final_modulation.visit("final_modulation", f);
        self.final_proj.visit("final_proj", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut T)) {
        self.patch_embed.visit_mut("patch_embed", f);
        self.text_embed.visit_mut("text_embed", f);
        self.time_in.visit_mut("time_in", f);
        self.time_out.visit_mut("time_out", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        self.final_modulation.visit_mut("final_modulation", f);
        self.final_proj.visit_mut("final_proj", f);
    }

    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |n, t| out.push((n, t)));
        out
    }
}

impl DitParams {
    /// Training initialization: modulation and output projections start at
    /// zero so every block begins as the identity and the initial velocity
    /// prediction is zero.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::random(cfg, rng);
        for b in &mut p.blocks {
            b.modulation = Linear::zeros(cfg.hidden, 6 * cfg.hidden);
        }
        p.final_modulation = Linear::zeros(cfg.hidden, 2 * cfg.hidden);
        p.final_proj = Linear::zeros(cfg.hidden, cfg.patch_dim());
        p
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        Self {
            patch_embed: Linear::zeros(cfg.patch_dim(), d),
            text_embed: Linear::zeros(d, d),
            time_in: Linear::zeros(d, d),
            time_out: Linear::zeros(d, d),
            blocks: (0..cfg.depth).map(|_| BlockParams::zeros(d, cfg.mlp_ratio)).collect(),
            final_modulation: Linear::zeros(d, 2 * d),
            final_proj: Linear::zeros(d, cfg.patch_dim()),
        }
    }

    /// Every tensor Gaussian; used for property tests and untrained demos.
    pub fn random<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.hidden;
        Self {
            patch_embed: Linear::init(cfg.patch_dim(), d, 1.0, rng),
            text_embed: Linear::init(d, d, 1.0, rng),
            time_in: Linear::init(d, d, 1.0, rng),
            time_out: Linear::init(d, d, 1.0, rng),
            blocks: (0..cfg.depth)
                .map(|_| BlockParams::random(d, cfg.mlp_ratio, 0.3, rng))
                .collect(),
            final_modulation: Linear::init(d, 2 * d, 0.3, rng),
            final_proj: Linear::init(d, cfg.patch_dim(), 0.5, rng),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Sinusoidal embedding of `t ∈ [0, 1]` (scaled by 1000) as a `1 × width` row.
pub fn timestep_embedding(t: f64, width: usize) -> Tensor {
    let half = width / 2;
    let mut data = vec![0.0; width];
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half.max(1) as f64).exp();
        let arg = 1000.0 * t * freq;
        data[k] = arg.cos();
        data[half + k] = arg.sin();
    }
    Tensor::matrix(1, width, data).expect("shape matches")
}

/// Attention mask and per-token rotation for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'a> {
    pub mask: &'a StepMask,
    pub rotation: &'a Arc<PairRotation>,
}

fn modulate(tape: &mut GradTape, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let scaled = tape.mul_row(x, scale)?;
    let y = tape.add(x, scaled)?;
    tape.add_row(y, shift)
}

/// One block on a tape. `cond` is the activated conditioning row (`1 × d`).
pub fn dit_block_on_tape(
    tape: &mut GradTape,
    x: Var,
    cond: Var,
    block: &BlockParams<Var>,
    mask: &StepMask,
    rot: &Arc<PairRotation>,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(x).cols();
    let m = block.modulation.forward(tape, cond)?;
    let mut chunks = Vec::with_capacity(6);
    for i in 0..6 {
        chunks.push(tape.slice_cols(m, i * d, d)?);
    }
    let (shift_a, scale_a, gate_a, shift_m, scale_m, gate_m) =
        (chunks[0], chunks[1], chunks[2], chunks[3], chunks[4], chunks[5]);

    let h = tape.layer_norm(x)?;
    let h = modulate(tape, h, shift_a, scale_a)?;
    let (a, _) = attention_on_tape(tape, h, &block.attention, mask, rot, heads)?;
    let a = tape.mul_row(a, gate_a)?;
    let x = tape.add(x, a)?;

    let h = tape.layer_norm(x)?;
    let h = modulate(tape, h, shift_m, scale_m)?;
    let h = block.mlp_in.forward(tape, h)?;
    let h = tape.silu(h)?;
    let h = block.mlp_out.forward(tape, h)?;
    let h = tape.mul_row(h, gate_m)?;
    tape.add(x, h)
}

/// Parameters plus the rotation table derived from the configuration.
#[derive(Clone, Debug)]
pub struct DitModel {
    pub config: ModelConfig,
    pub params: DitParams,
    table: RotationTable,
}

impl DitModel {
    pub fn new(config: ModelConfig, params: DitParams) -> Result<Self> {
        config.validate()?;
        let expected = DitParams::zeros(&config);
        for ((name, want), (_, got)) in expected.entries().iter().zip(params.entries()) {
            if want.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        if params.blocks.len() != config.depth {
            return Err(Error::Checkpoint(format!(
                "{} blocks for depth {}",
                params.blocks.len(),
                config.depth
            )));
        }
        let table = RotationTable::new(config.head_dim, config.rope_base)?;
        Ok(Self { config, params, table })
    }

    /// Fresh training initialization from `config.seed`.
    pub fn initialized(config: ModelConfig) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let params = DitParams::init(&config, &mut rng);
        Self::new(config, params)
    }

    /// All-random weights from `config.seed`.
    pub fn random(config: ModelConfig) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let params = DitParams::random(&config, &mut rng);
        Self::new(config, params)
    }

    pub fn rotation_table(&self) -> &RotationTable {
        &self.table
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut GradTape) -> DitVars {
        self.params.map(&mut |_, t| tape.leaf(t.clone()))
    }

    /// Activated conditioning row for time `t`.
    pub fn conditioning_on_tape(&self, tape: &mut GradTape, vars: &DitVars, t: f64) -> Result<Var> {
        let temb = tape.leaf(timestep_embedding(t, self.config.hidden));
        let c = vars.time_in.forward(tape, temb)?;
        let c = tape.silu(c)?;
        let c = vars.time_out.forward(tape, c)?;
        tape.silu(c)
    }

    /// Velocity prediction for the latent part of `[text; latents]`.
    ///
    /// `text` is `Tt × hidden`, `latents` is `L × patch_dim`; the output is
    /// `L × patch_dim`.
    pub fn forward_on_tape(
        &self,
        tape: &mut GradTape,
        vars: &DitVars,
        text: Var,
        latents: Var,
        t: f64,
        cond: &Conditioning<'_>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let text_len = tape.value(text).rows();
        let latent_len = tape.value(latents).rows();
        if tape.value(latents).cols() != cfg.patch_dim() {
            return Err(Error::dim(
                "forward latents",
                tape.value(latents).shape(),
                &[cfg.patch_dim()],
            ));
        }
        if tape.value(text).cols() != cfg.hidden {
            return Err(Error::dim("forward text", tape.value(text).shape(), &[cfg.hidden]));
        }
        if cond.mask.total_tokens() != text_len + latent_len || cond.mask.text_tokens() != text_len {
            return Err(Error::dim(
                "forward mask",
                &[text_len, latent_len],
                &[cond.mask.text_tokens(), cond.mask.total_tokens()],
            ));
        }
        let c = self.conditioning_on_tape(tape, vars, t)?;
        let te = vars.text_embed.forward(tape, text)?;
        let ze = vars.patch_embed.forward(tape, latents)?;
        let mut x = tape.concat_rows(&[te, ze])?;
        for block in &vars.blocks {
            x = dit_block_on_tape(tape, x, c, block, cond.mask, cond.rotation, cfg.heads)?;
        }
        let z = tape.slice_rows(x, text_len, latent_len)?;
        let m = vars.final_modulation.forward(tape, c)?;
        let shift = tape.slice_cols(m, 0, cfg.hidden)?;
        let scale = tape.slice_cols(m, cfg.hidden, cfg.hidden)?;
        let h = tape.layer_norm(z)?;
        let h = modulate(tape, h, shift, scale)?;
        vars.final_proj.forward(tape, h)
    }

    /// Applies block `index` to an embedded joint sequence at time `t`.
    pub fn dit_block(
        &self,
        index: usize,
        x: &JointSequence,
        t: f64,
        mask: &StepMask,
        rot: &Arc<PairRotation>,
    ) -> Result<JointSequence> {
        let block = self
            .params
            .blocks
            .get(index)
            .ok_or_else(|| Error::Parameter(format!("no block {index}")))?;
        let mut tape = GradTape::new();
        let vars = self.bind(&mut tape);
        let bv = block.map("block", &mut |_, t| tape.leaf(t.clone()));
        let c = self.conditioning_on_tape(&mut tape, &vars, t)?;
        let xv = tape.leaf(x.tokens.clone());
        let out = dit_block_on_tape(&mut tape, xv, c, &bv, mask, rot, self.config.heads)?;
        Ok(JointSequence {
            tokens: tape.value(out).clone(),
            extents: x.extents.clone(),
        })
    }
}
