//! Recipe input, a deterministic word-level tokenizer, toy text encoders
//! and step-boundary bookkeeping for joint encodings.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Linear;
use crate::regional::{attention_on_tape, no_rotation, AttentionParams, StepMask};
use crate::tensor::{self, GradTape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipeStep {
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ingredients: Vec<String>,
}

impl RecipeStep {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ingredients: Vec::new(),
        }
    }
}

/// A goal plus ordered steps; the unit of generation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipeSpec {
    pub goal: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    pub steps: Vec<RecipeStep>,
}

impl RecipeSpec {
    pub fn new(goal: impl Into<String>, steps: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            goal: goal.into(),
            summary: None,
            steps: steps.into_iter().map(|s| RecipeStep::new(s)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Schema("recipe must have at least one step".into()));
        }
        if let Some(k) = self.steps.iter().position(|s| s.text.trim().is_empty()) {
            return Err(Error::Schema(format!("steps[{k}].text is empty")));
        }
        Ok(())
    }

    /// Parses the recipe JSON file format, reporting the failing path.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("invalid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Schema("$: expected an object".into()))?;
        match obj.get("goal") {
            Some(serde_json::Value::String(_)) => {}
            _ => return Err(Error::Schema("$.goal: expected a string".into())),
        }
        if let Some(s) = obj.get("summary") {
            if !s.is_string() && !s.is_null() {
                return Err(Error::Schema("$.summary: expected a string".into()));
            }
        }
        let steps = obj
            .get("steps")
            .and_then(|s| s.as_array())
            .ok_or_else(|| Error::Schema("$.steps: expected an array".into()))?;
        for (k, step) in steps.iter().enumerate() {
            if !step.get("text").is_some_and(|t| t.is_string()) {
                return Err(Error::Schema(format!("$.steps[{k}].text: expected a string")));
            }
            if let Some(ing) = step.get("ingredients") {
                let ok = ing.as_array().is_some_and(|a| a.iter().all(|i| i.is_string()));
                if !ok {
                    return Err(Error::Schema(format!(
                        "$.steps[{k}].ingredients: expected an array of strings"
                    )));
                }
            }
        }
        let recipe: RecipeSpec = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn step_texts(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.text.as_str()).collect()
    }

    /// Union of step ingredient annotations in first-seen order.
    pub fn ingredients(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for ing in self.steps.iter().flat_map(|s| &s.ingredients) {
            if !out.iter().any(|o| o.eq_ignore_ascii_case(ing)) {
                out.push(ing.clone());
            }
        }
        out
    }
}

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[step-\d+\]|[\p{L}\p{N}]+|[^\s\p{L}\p{N}]").expect("valid regex"))
}

/// Lowercases and splits into words, step tags and single punctuation marks.
/// No token spans whitespace, so tokenizing `a + " " + b` yields the tokens
/// of `a` followed by those of `b`.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    token_regex()
        .find_iter(&lower)
        .map(|m| m.as_str().to_string())
        .collect()
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Stable 64-bit FNV-1a id for an open vocabulary.
pub fn token_id(token: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn token_ids(tokens: &[String]) -> Vec<u64> {
    tokens.iter().map(|t| token_id(t)).collect()
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Prefixes each step with `[step-n] `, stripping any existing tag first.
pub fn format_prompt(recipe: &RecipeSpec) -> RecipeSpec {
    let mut out = recipe.clone();
    for (k, step) in out.steps.iter_mut().enumerate() {
        step.text = format!("[step-{}] {}", k + 1, strip_step_tag(&step.text));
    }
    out
}

/// Removes a leading `[step-n]` tag and the following whitespace.
pub fn strip_step_tag(text: &str) -> &str {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"^\s*\[step-\d+\]\s*").expect("valid regex"));
    match re.find(text) {
        Some(m) => &text[m.end()..],
        None => text,
    }
}

/// Which text encoder backs the conditioning tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Per-token table lookup; encodings are context-free.
    Toy,
    /// Table lookup followed by one fixed self-attention layer.
    #[default]
    ContextMixing,
}

/// Maps a token sequence to `len × width` embeddings.
pub trait TextEncoder: Send + Sync {
    fn width(&self) -> usize;
    fn backend_id(&self) -> &'static str;
    fn encode(&self, tokens: &[String]) -> Result<Tensor>;
}

/// Seeded hash-indexed embedding table.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    width: usize,
    table_size: usize,
    seed: u64,
    table: Vec<f64>,
}

pub const DEFAULT_TABLE_SIZE: usize = 4096;

impl ToyEncoder {
    pub fn new(width: usize, seed: u64) -> Self {
        Self::with_table_size(width, DEFAULT_TABLE_SIZE, seed)
    }

    pub fn with_table_size(width: usize, table_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x7e57));
        let table = Tensor::randn(&[table_size, width], 1.0, &mut rng).into_data();
        Self {
            width,
            table_size,
            seed,
            table,
        }
    }

    pub fn table_size(&self) -> usize {
        self.table_size
    }

    /// Table row a token id lands in.
    pub fn slot(&self, id: u64) -> usize {
        (splitmix(id ^ splitmix(self.seed)) % self.table_size as u64) as usize
    }

    pub fn embed_ids(&self, ids: &[u64]) -> Tensor {
        let mut data = Vec::with_capacity(ids.len() * self.width);
        for &id in ids {
            let s = self.slot(id);
            data.extend_from_slice(&self.table[s * self.width..(s + 1) * self.width]);
        }
        Tensor::matrix(ids.len(), self.width, data).expect("shape matches")
    }
}

impl TextEncoder for ToyEncoder {
    fn width(&self) -> usize {
        self.width
    }

    fn backend_id(&self) -> &'static str {
        "toy"
    }

    fn encode(&self, tokens: &[String]) -> Result<Tensor> {
        Ok(self.embed_ids(&token_ids(tokens)))
    }
}

/// Toy embeddings plus a residual seeded self-attention layer, so a token's
/// encoding depends on the surrounding text.
#[derive(Clone, Debug)]
pub struct ContextMixingEncoder {
    base: ToyEncoder,
    attention: AttentionParams,
    heads: usize,
}

impl ContextMixingEncoder {
    pub fn new(width: usize, seed: u64) -> Self {
        let base = ToyEncoder::new(width, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0xc0e7));
        let attention = AttentionParams {
            qkv: Linear::init(width, 3 * width, 1.0, &mut rng),
            out: Linear::init(width, width, 0.5, &mut rng),
        };
        let heads = if width.is_multiple_of(4) && width >= 8 { 4 } else { 1 };
        Self { base, attention, heads }
    }
}

impl TextEncoder for ContextMixingEncoder {
    fn width(&self) -> usize {
        self.base.width
    }

    fn backend_id(&self) -> &'static str {
        "context_mixing"
    }

    fn encode(&self, tokens: &[String]) -> Result<Tensor> {
        let x = self.base.encode(tokens)?;
        if tokens.is_empty() {
            return Ok(x);
        }
        let mut tape = GradTape::new();
        let xv = tape.leaf(x.clone());
        let p = self.attention.map("mix", &mut |_, t| tape.leaf(t.clone()));
        let mask = StepMask::single_block(tokens.len())?;
        let rot = no_rotation(tokens.len(), self.base.width / self.heads);
        let (mixed, _) = attention_on_tape(&mut tape, xv, &p, &mask, &rot, self.heads)?;
        tensor::add(&x, tape.value(mixed))
    }
}

pub fn build_encoder(kind: EncoderKind, width: usize, seed: u64) -> Box<dyn TextEncoder> {
    match kind {
        EncoderKind::Toy => Box::new(ToyEncoder::new(width, seed)),
        EncoderKind::ContextMixing => Box::new(ContextMixingEncoder::new(width, seed)),
    }
}

/// Where a token block came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockSource {
    Step(usize),
    WholeRecipe,
}

/// Start offset `b` and length `t` of a step inside the joint encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Boundary {
    pub start: usize,
    pub len: usize,
}

/// Embedded tokens for one step or for the whole recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBlock {
    pub tokens: Tensor,
    pub source: BlockSource,
    pub boundary: Option<Boundary>,
}

impl TokenBlock {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Embeds token ids with the context-free table.
pub fn embed(ids: &[u64], encoder: &ToyEncoder, source: BlockSource) -> TokenBlock {
    TokenBlock {
        tokens: encoder.embed_ids(ids),
        source,
        boundary: None,
    }
}

/// Encodes each step's text on its own.
pub fn encode_steps_independent(recipe: &RecipeSpec, encoder: &dyn TextEncoder) -> Result<Vec<TokenBlock>> {
    recipe
        .steps
        .iter()
        .enumerate()
        .map(|(n, s)| {
            Ok(TokenBlock {
                tokens: encoder.encode(&tokenize(&s.text))?,
                source: BlockSource::Step(n),
                boundary: None,
            })
        })
        .collect()
}

/// Encodes `summary? + step_1 + … + step_N` in one pass and reports where
/// each step's tokens sit. Summary tokens belong to no step.
pub fn encode_recipe_joint(recipe: &RecipeSpec, encoder: &dyn TextEncoder) -> Result<(TokenBlock, Vec<Boundary>)> {
    let mut segments: Vec<&str> = Vec::new();
    if let Some(s) = recipe.summary.as_deref().filter(|s| !s.trim().is_empty()) {
        segments.push(s);
    }
    let prefix_segments = segments.len();
    segments.extend(recipe.steps.iter().map(|s| s.text.as_str()));

    let joint_tokens = tokenize(&segments.join(" "));
    let lens: Vec<usize> = segments.iter().map(|s| tokenize(s).len()).collect();
    let total: usize = lens.iter().sum();
    if total != joint_tokens.len() {
        return Err(Error::Alignment {
            independent: total,
            contextual: joint_tokens.len(),
        });
    }
    let mut start: usize = lens[..prefix_segments].iter().sum();
    let boundaries = lens[prefix_segments..]
        .iter()
        .map(|&len| {
            let b = Boundary { start, len };
            start += len;
            b
        })
        .collect();
    let tokens = encoder.encode(&joint_tokens)?;
    Ok((
        TokenBlock {
            tokens,
            source: BlockSource::WholeRecipe,
            boundary: Some(Boundary {
                start: 0,
                len: joint_tokens.len(),
            }),
        },
        boundaries,
    ))
}

/// Mean-pooled embedding of a text, the stand-in for a pooled sentence vector.
pub fn pooled_embedding(text: &str, encoder: &dyn TextEncoder) -> Result<Vec<f64>> {
    let t = encoder.encode(&tokenize(text))?;
    let mut out = vec![0.0; encoder.width()];
    if t.rows() == 0 {
        return Ok(out);
    }
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    let n = t.rows() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_example() {
        assert_eq!(tokenize("Chop the onion."), vec!["chop", "the", "onion", "."]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("[step-2] Fry eggs")[0], "[step-2]");
    }

    #[test]
    fn format_prompt_tags_and_is_idempotent() {
        let r = RecipeSpec::new("eggs", ["Crack eggs", "Fry eggs"]);
        let f = format_prompt(&r);
        assert_eq!(f.steps[1].text, "[step-2] Fry eggs");
        assert_eq!(format_prompt(&f), f);
        assert_eq!(strip_step_tag(&f.steps[1].text), "Fry eggs");
    }

    #[test]
    fn joint_boundaries_tile_after_summary() {
        let mut r = RecipeSpec::new("g", ["a b c", "d e f g h"]);
        let enc = ToyEncoder::new(8, 0);
        let (joint, b) = encode_recipe_joint(&r, &enc).unwrap();
        assert_eq!(b, vec![Boundary { start: 0, len: 3 }, Boundary { start: 3, len: 5 }]);
        assert_eq!(joint.len(), 8);
        r.summary = Some("two words".into());
        let (joint, b) = encode_recipe_joint(&r, &enc).unwrap();
        assert_eq!(b[0].start, 2);
        assert_eq!(joint.len(), 10);
    }

    #[test]
    fn toy_joint_slices_equal_independent_blocks() {
        let r = format_prompt(&RecipeSpec::new("g", ["Chop the onion.", "Fry it, gently!"]));
        let enc = ToyEncoder::new(16, 3);
        let (joint, bounds) = encode_recipe_joint(&r, &enc).unwrap();
        let ind = encode_steps_independent(&r, &enc).unwrap();
        for (b, block) in bounds.iter().zip(&ind) {
            let slice = tensor::slice_rows(&joint.tokens, b.start, b.len).unwrap();
            assert!(slice.bit_eq(&block.tokens));
        }
    }

    #[test]
    fn context_mixing_depends_on_context() {
        let enc = ContextMixingEncoder::new(16, 1);
        let a = enc.encode(&tokenize("red circle")).unwrap();
        let b = enc.encode(&tokenize("red circle and blue square")).unwrap();
        let head = tensor::slice_rows(&b, 0, 2).unwrap();
        assert!(a.max_abs_diff(&head) > 1e-6);
        assert_eq!(enc.encode(&tokenize("red circle")).unwrap(), a);
    }

    #[test]
    fn recipe_json_errors_name_the_path() {
        let err = RecipeSpec::from_json(r#"{"goal":"x","steps":[{"text":1}]}"#).unwrap_err();
        assert!(err.to_string().contains("$.steps[0].text"), "{err}");
        let err = RecipeSpec::from_json(r#"{"steps":[]}"#).unwrap_err();
        assert!(err.to_string().contains("$.goal"), "{err}");
        let ok = RecipeSpec::from_json(r#"{"goal":"x","summary":"s","steps":[{"text":"a","ingredients":["egg"]}]}"#)
            .unwrap();
        assert_eq!(ok.steps[0].ingredients, vec!["egg"]);
        assert!(RecipeSpec::from_json(r#"{"goal":"x","steps":[]}"#).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn words() -> impl Strategy<Value = String> {
        "[A-Za-z0-9 ,.!'-]{0,40}"
    }

    proptest! {
        #[test]
        fn tokenize_distributes_over_space_concatenation(a in words(), b in words()) {
            let mut expect = tokenize(&a);
            expect.extend(tokenize(&b));
            prop_assert_eq!(tokenize(&format!("{a} {b}")), expect);
        }

        #[test]
        fn detokenize_is_idempotent(s in words()) {
            let once = tokenize(&s);
            let again = tokenize(&detokenize(&once));
            prop_assert_eq!(&again, &once);
            prop_assert_eq!(detokenize(&again), detokenize(&once));
        }

        #[test]
        fn boundaries_partition_the_joint_block(
            steps in prop::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,5}[.]?", 1..8),
            summary in prop::option::of("[a-z]{1,6}( [a-z]{1,6}){0,4}"),
        ) {
            let mut recipe = RecipeSpec::new("goal", steps.clone());
            recipe.summary = summary.clone();
            let enc = ToyEncoder::new(8, 0);
            let (joint, bounds) = encode_recipe_joint(&recipe, &enc).unwrap();
            let prefix = summary.as_deref().map_or(0, |s| tokenize(s).len());
            prop_assert_eq!(bounds.len(), steps.len());
            let mut next = prefix;
            for (b, s) in bounds.iter().zip(&steps) {
                prop_assert_eq!(b.start, next);
                prop_assert_eq!(b.len, tokenize(s).len());
                next += b.len;
            }
            prop_assert_eq!(next, joint.len());
        }
    }

    #[test]
    fn toy_table_collisions_match_uniform_hashing() {
        let enc = ToyEncoder::with_table_size(8, 1024, 0);
        let n = 4000;
        let mut used = std::collections::HashSet::new();
        for k in 0..n {
            used.insert(enc.slot(token_id(&format!("word{k}"))));
        }
        let m = enc.table_size() as f64;
        let expected = m * (1.0 - (1.0 - 1.0 / m).powi(n));
        let got = used.len() as f64;
        assert!((got - expected).abs() / expected < 0.03, "{got} vs {expected}");
    }
}
