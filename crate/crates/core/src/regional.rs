//! Step-wise regional attention: the block mask binding step text to its
//! image region, masked joint attention over `[text; latents]`, the
//! regional and whole-description passes, and their latent fusion.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dit::{Conditioning, DitModel, DitVars};
use crate::error::{Error, Result};
use crate::layout::RegionLayout;
use crate::params::Linear;
use crate::rope::{joint_rotation, RopeMode, RotationTable};
use crate::tensor::{self, BitMatrix, GradTape, PairRotation, Tensor, Var};

/// What a contiguous token block holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum BlockKind {
    /// Text of step `n` (0-based).
    StepText(usize),
    /// Text of the whole recipe.
    RecipeText,
    /// Latent tokens of region `n` (0-based).
    Region(usize),
    /// All latent tokens.
    Latents,
}

impl BlockKind {
    pub fn is_text(self) -> bool {
        matches!(self, BlockKind::StepText(_) | BlockKind::RecipeText)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockExtent {
    pub offset: usize,
    pub len: usize,
    pub kind: BlockKind,
}

/// Attention permission at block and token granularity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepMask {
    block_matrix: BitMatrix,
    token_matrix: BitMatrix,
    extents: Vec<BlockExtent>,
}

fn tile(kinds_and_lens: impl IntoIterator<Item = (BlockKind, usize)>) -> Vec<BlockExtent> {
    let mut offset = 0;
    kinds_and_lens
        .into_iter()
        .map(|(kind, len)| {
            let e = BlockExtent { offset, len, kind };
            offset += len;
            e
        })
        .collect()
}

fn step_extents(step_token_lengths: &[usize], region_token_counts: &[usize]) -> Result<Vec<BlockExtent>> {
    let n = step_token_lengths.len();
    if n == 0 {
        return Err(Error::InvalidLayout("at least one step is required".into()));
    }
    if region_token_counts.len() != n {
        return Err(Error::InvalidLayout(format!(
            "{n} steps but {} regions",
            region_token_counts.len()
        )));
    }
    if let Some(k) = step_token_lengths.iter().position(|&l| l == 0) {
        return Err(Error::InvalidLayout(format!("step {} has no text tokens", k + 1)));
    }
    if let Some(k) = region_token_counts.iter().position(|&l| l == 0) {
        return Err(Error::InvalidLayout(format!("region {} has no latent tokens", k + 1)));
    }
    Ok(tile(
        step_token_lengths
            .iter()
            .enumerate()
            .map(|(k, &l)| (BlockKind::StepText(k), l))
            .chain(
                region_token_counts
                    .iter()
                    .enumerate()
                    .map(|(k, &l)| (BlockKind::Region(k), l)),
            ),
    ))
}

fn expand(block_matrix: &BitMatrix, extents: &[BlockExtent]) -> BitMatrix {
    let total: usize = extents.iter().map(|e| e.len).sum();
    let mut token_matrix = BitMatrix::new(total, total);
    for (bi, ei) in extents.iter().enumerate() {
        for (bj, ej) in extents.iter().enumerate() {
            if block_matrix.get(bi, bj) {
                for p in ei.offset..ei.offset + ei.len {
                    for q in ej.offset..ej.offset + ej.len {
                        token_matrix.set(p, q, true);
                    }
                }
            }
        }
    }
    token_matrix
}

/// Builds the `2N × 2N` step-region mask: block `i` may attend to block `j`
/// iff `i == j` or `|i − j| == N`. Blocks `0..N` are step texts, `N..2N`
/// the matching latent regions.
pub fn build_step_mask(step_token_lengths: &[usize], region_token_counts: &[usize]) -> Result<StepMask> {
    let extents = step_extents(step_token_lengths, region_token_counts)?;
    let n = step_token_lengths.len();
    let block_matrix = BitMatrix::from_fn(2 * n, 2 * n, |i, j| i == j || i.abs_diff(j) == n);
    let token_matrix = expand(&block_matrix, &extents);
    Ok(StepMask {
        block_matrix,
        token_matrix,
        extents,
    })
}

impl StepMask {
    /// Same block structure as [`build_step_mask`] but every pair allowed.
    pub fn all_ones(step_token_lengths: &[usize], region_token_counts: &[usize]) -> Result<Self> {
        let extents = step_extents(step_token_lengths, region_token_counts)?;
        let b = extents.len();
        let block_matrix = BitMatrix::ones(b, b);
        let token_matrix = expand(&block_matrix, &extents);
        Ok(Self {
            block_matrix,
            token_matrix,
            extents,
        })
    }

    /// Full joint attention over one text block and one latent block.
    pub fn dense(text_tokens: usize, latent_tokens: usize) -> Result<Self> {
        if text_tokens == 0 || latent_tokens == 0 {
            return Err(Error::InvalidLayout("dense mask needs text and latents".into()));
        }
        let extents = tile([
            (BlockKind::RecipeText, text_tokens),
            (BlockKind::Latents, latent_tokens),
        ]);
        let block_matrix = BitMatrix::ones(2, 2);
        let token_matrix = expand(&block_matrix, &extents);
        Ok(Self {
            block_matrix,
            token_matrix,
            extents,
        })
    }

    /// One all-ones block over `tokens` text tokens.
    pub fn single_block(tokens: usize) -> Result<Self> {
        if tokens == 0 {
            return Err(Error::InvalidLayout("empty block".into()));
        }
        let extents = tile([(BlockKind::RecipeText, tokens)]);
        let block_matrix = BitMatrix::ones(1, 1);
        let token_matrix = expand(&block_matrix, &extents);
        Ok(Self {
            block_matrix,
            token_matrix,
            extents,
        })
    }

    pub fn block_matrix(&self) -> &BitMatrix {
        &self.block_matrix
    }

    pub fn token_matrix(&self) -> &BitMatrix {
        &self.token_matrix
    }

    pub fn extents(&self) -> &[BlockExtent] {
        &self.extents
    }

    pub fn total_tokens(&self) -> usize {
        self.token_matrix.rows()
    }

    pub fn text_tokens(&self) -> usize {
        self.extents.iter().filter(|e| e.kind.is_text()).map(|e| e.len).sum()
    }

    /// Index of the block containing token `p`.
    pub fn block_of(&self, p: usize) -> Option<usize> {
        self.extents.iter().position(|e| p >= e.offset && p < e.offset + e.len)
    }
}

/// Token blocks `[text blocks…; latent blocks…]` with their extents.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSequence {
    pub tokens: Tensor,
    pub extents: Vec<BlockExtent>,
}

impl JointSequence {
    /// Concatenates text blocks followed by latent blocks.
    pub fn new(text: &[(BlockKind, &Tensor)], latents: &[(BlockKind, &Tensor)]) -> Result<Self> {
        if let Some((k, _)) = text.iter().find(|(k, _)| !k.is_text()) {
            return Err(Error::InvalidLayout(format!("{k:?} listed as text")));
        }
        if let Some((k, _)) = latents.iter().find(|(k, _)| k.is_text()) {
            return Err(Error::InvalidLayout(format!("{k:?} listed as latent")));
        }
        let all: Vec<_> = text.iter().chain(latents).collect();
        let extents = tile(all.iter().map(|(k, t)| (*k, t.rows())));
        let parts: Vec<&Tensor> = all.iter().map(|(_, t)| *t).collect();
        Ok(Self {
            tokens: tensor::concat_rows(&parts)?,
            extents,
        })
    }

    pub fn text_tokens(&self) -> usize {
        self.extents.iter().filter(|e| e.kind.is_text()).map(|e| e.len).sum()
    }

    pub fn block(&self, i: usize) -> Result<Tensor> {
        let e = self.extents[i];
        tensor::slice_rows(&self.tokens, e.offset, e.len)
    }
}

/// Query/key/value and output projections of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub qkv: Linear<T>,
    pub out: Linear<T>,
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> AttentionParams<U> {
        AttentionParams {
            qkv: self.qkv.map(&format!("{prefix}.qkv"), f),
            out: self.out.map(&format!("{prefix}.out"), f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.qkv.visit(&format!("{prefix}.qkv"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        self.qkv.visit_mut(&format!("{prefix}.qkv"), f);
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }
}

/// Multi-head masked attention recorded on a tape.
///
/// `x` is `T × d`; queries and keys are rotated by `rot` (one row per token)
/// before the scaled dot product. Returns the projected output and, per
/// head, the attention probability matrix.
pub fn attention_on_tape(
    tape: &mut GradTape,
    x: Var,
    params: &AttentionParams<Var>,
    mask: &StepMask,
    rot: &Arc<PairRotation>,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let tokens = tape.value(x).rows();
    let d = tape.value(x).cols();
    if mask.total_tokens() != tokens {
        return Err(Error::dim("joint_attention", &[tokens], &[mask.total_tokens()]));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::dim("joint_attention heads", &[d], &[heads]));
    }
    let head_dim = d / heads;
    let qkv = params.qkv.forward(tape, x)?;
    let q = tape.slice_cols(qkv, 0, d)?;
    let q = tape.rotate_pairs(q, rot.clone())?;
    let k = tape.slice_cols(qkv, d, d)?;
    let k = tape.rotate_pairs(k, rot.clone())?;
    let v = tape.slice_cols(qkv, 2 * d, d)?;
    let inv = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let logits = tape.matmul_bt(qh, kh)?;
        let logits = tape.scale(logits, inv)?;
        let p = tape.masked_softmax_rows(logits, mask.token_matrix())?;
        outs.push(tape.matmul(p, vh)?);
        probs.push(p);
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((params.out.forward(tape, joined)?, probs))
}

/// Identity rotation for attention without positions.
pub fn no_rotation(tokens: usize, head_dim: usize) -> Arc<PairRotation> {
    Arc::new(PairRotation::identity(tokens, head_dim / 2))
}

/// Masked joint attention on a standalone sequence. Returns the updated
/// sequence and the per-head probability matrices.
pub fn joint_attention(
    x: &JointSequence,
    mask: &StepMask,
    params: &AttentionParams,
    rot: &Arc<PairRotation>,
    heads: usize,
) -> Result<(JointSequence, Vec<Tensor>)> {
    let mut tape = GradTape::new();
    let xv = tape.leaf(x.tokens.clone());
    let pv = params.map("attn", &mut |_, t| tape.leaf(t.clone()));
    let (out, probs) = attention_on_tape(&mut tape, xv, &pv, mask, rot, heads)?;
    Ok((
        JointSequence {
            tokens: tape.value(out).clone(),
            extents: x.extents.clone(),
        },
        probs.into_iter().map(|p| tape.value(p).clone()).collect(),
    ))
}

/// Weighted interpolation of base and regional latents:
/// `α · z_base + (1 − α) · z_region`.
pub fn fuse_latents(z_base: &Tensor, z_region: &Tensor, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    if z_base.shape() != z_region.shape() {
        return Err(Error::dim("fuse_latents", z_base.shape(), z_region.shape()));
    }
    let data = z_base
        .data()
        .iter()
        .zip(z_region.data())
        .map(|(b, r)| alpha * b + (1.0 - alpha) * r)
        .collect();
    Tensor::new(z_base.shape().to_vec(), data)
}

pub fn fuse_latents_on_tape(tape: &mut GradTape, z_base: Var, z_region: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let b = tape.scale(z_base, alpha)?;
    let r = tape.scale(z_region, 1.0 - alpha)?;
    tape.add(b, r)
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Mask choice for the regional pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegionalMask {
    /// Step text ↔ paired region only.
    #[default]
    StepRegional,
    /// Everything attends to everything (ablation).
    AllOnes,
}

/// Everything the regional pass needs besides latents and time.
#[derive(Clone, Debug)]
pub struct RegionalInputs {
    /// Per-step text blocks, already fused when cross-step context is on.
    pub step_tokens: Vec<Tensor>,
    pub mask: StepMask,
    pub rotation: Arc<PairRotation>,
}

impl RegionalInputs {
    pub fn new(
        step_tokens: Vec<Tensor>,
        layout: &RegionLayout,
        table: &RotationTable,
        rope: RopeMode,
        mask: RegionalMask,
    ) -> Result<Self> {
        if step_tokens.len() != layout.len() {
            return Err(Error::InvalidLayout(format!(
                "{} step blocks for {} regions",
                step_tokens.len(),
                layout.len()
            )));
        }
        let lens: Vec<usize> = step_tokens.iter().map(Tensor::rows).collect();
        let counts = layout.token_counts();
        let mask = match mask {
            RegionalMask::StepRegional => build_step_mask(&lens, &counts)?,
            RegionalMask::AllOnes => StepMask::all_ones(&lens, &counts)?,
        };
        let rotation = joint_rotation(table, lens.iter().sum(), layout, rope)?;
        Ok(Self {
            step_tokens,
            mask,
            rotation,
        })
    }

    pub fn text(&self) -> Result<Tensor> {
        tensor::concat_rows(&self.step_tokens.iter().collect::<Vec<_>>())
    }
}

/// Inputs of the whole-description pass.
#[derive(Clone, Debug)]
pub struct BaseInputs {
    pub recipe_tokens: Tensor,
    pub mask: StepMask,
    pub rotation: Arc<PairRotation>,
}

impl BaseInputs {
    pub fn new(recipe_tokens: Tensor, layout: &RegionLayout, table: &RotationTable, rope: RopeMode) -> Result<Self> {
        let mask = StepMask::dense(recipe_tokens.rows(), layout.total_tokens())?;
        let rotation = joint_rotation(table, recipe_tokens.rows(), layout, rope)?;
        Ok(Self {
            recipe_tokens,
            mask,
            rotation,
        })
    }
}

/// Regional pass on a tape: step texts and latents under the step mask.
pub fn regional_pass_on_tape(
    model: &DitModel,
    tape: &mut GradTape,
    vars: &DitVars,
    text: Var,
    latents: Var,
    t: f64,
    inputs: &RegionalInputs,
) -> Result<Var> {
    let cond = Conditioning {
        mask: &inputs.mask,
        rotation: &inputs.rotation,
    };
    model.forward_on_tape(tape, vars, text, latents, t, &cond)
}

/// Whole-description pass on a tape: recipe text and latents, full attention.
pub fn base_pass_on_tape(
    model: &DitModel,
    tape: &mut GradTape,
    vars: &DitVars,
    text: Var,
    latents: Var,
    t: f64,
    inputs: &BaseInputs,
) -> Result<Var> {
    let cond = Conditioning {
        mask: &inputs.mask,
        rotation: &inputs.rotation,
    };
    model.forward_on_tape(tape, vars, text, latents, t, &cond)
}

/// Regional prediction for the latent portion.
pub fn regional_pass(model: &DitModel, latents: &Tensor, t: f64, inputs: &RegionalInputs) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let vars = model.bind(&mut tape);
    let text = tape.leaf(inputs.text()?);
    let z = tape.leaf(latents.clone());
    let out = regional_pass_on_tape(model, &mut tape, &vars, text, z, t, inputs)?;
    Ok(tape.value(out).clone())
}

/// Whole-description prediction for the latent portion.
pub fn base_pass(model: &DitModel, latents: &Tensor, t: f64, inputs: &BaseInputs) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let vars = model.bind(&mut tape);
    let text = tape.leaf(inputs.recipe_tokens.clone());
    let z = tape.leaf(latents.clone());
    let out = base_pass_on_tape(model, &mut tape, &vars, text, z, t, inputs)?;
    Ok(tape.value(out).clone())
}
