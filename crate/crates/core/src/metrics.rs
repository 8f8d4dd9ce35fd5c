//! Sequence metrics: embedding similarities, cross-step consistency, and
//! chat-model scoring.

use std::io::Cursor;

use base64::Engine as _;
use image::{ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::llm::{extract_json_object, ChatMessage, Endpoint};
use crate::text::{strip_step_tag, token_ids, tokenize, ToyEncoder};

/// Maps images and texts to unit-norm vectors.
pub trait Embedder {
    fn backend_id(&self) -> String;
    fn width(&self) -> usize;
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

pub const TOY_EMBED_WIDTH: usize = 64;
const TOY_GRID: usize = 8;

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Parameter(
            "cannot normalize a zero or non-finite embedding".into(),
        ));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Seeded random projection of an 8×8 RGB thumbnail; texts use the mean
/// toy token embedding.
#[derive(Clone, Debug)]
pub struct ToyEmbedder {
    seed: u64,
    /// `(8·8·3) × 64`, row-major.
    projection: Vec<f64>,
    text: ToyEncoder,
}

impl ToyEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a9e_5eed);
        let inputs = TOY_GRID * TOY_GRID * 3;
        let projection = (0..inputs * TOY_EMBED_WIDTH)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Self {
            seed,
            projection,
            text: ToyEncoder::new(TOY_EMBED_WIDTH, seed),
        }
    }

    /// Area-averaged 8×8 thumbnail in `[-1, 1]`, row-major RGB.
    pub fn thumbnail(image: &RgbImage) -> Result<Vec<f64>> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        if w == 0 || h == 0 {
            return Err(Error::Parameter("empty image".into()));
        }
        let mut sums = vec![0.0; TOY_GRID * TOY_GRID * 3];
        let mut counts = vec![0usize; TOY_GRID * TOY_GRID];
        for (x, y, px) in image.enumerate_pixels() {
            let cell = (y as usize * TOY_GRID / h) * TOY_GRID + x as usize * TOY_GRID / w;
            counts[cell] += 1;
            for c in 0..3 {
                sums[3 * cell + c] += px.0[c] as f64 / 127.5 - 1.0;
            }
        }
        for (cell, &n) in counts.iter().enumerate() {
            for c in 0..3 {
                sums[3 * cell + c] /= n.max(1) as f64;
            }
        }
        Ok(sums)
    }
}

impl Embedder for ToyEmbedder {
    fn backend_id(&self) -> String {
        format!("builtin-toy:{}", self.seed)
    }

    fn width(&self) -> usize {
        TOY_EMBED_WIDTH
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let thumb = Self::thumbnail(image)?;
        let mut out = vec![0.0; TOY_EMBED_WIDTH];
        for (i, x) in thumb.iter().enumerate() {
            let row = &self.projection[i * TOY_EMBED_WIDTH..(i + 1) * TOY_EMBED_WIDTH];
            for (o, p) in out.iter_mut().zip(row) {
                *o += x * p;
            }
        }
        normalize(out)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let ids = token_ids(&tokenize(strip_step_tag(text)));
        if ids.is_empty() {
            return Err(Error::Parameter("cannot embed empty text".into()));
        }
        let t = self.text.embed_ids(&ids);
        let mut mean = vec![0.0; TOY_EMBED_WIDTH];
        for r in 0..t.rows() {
            for (m, v) in mean.iter_mut().zip(t.row(r)) {
                *m += v / t.rows() as f64;
            }
        }
        normalize(mean)
    }
}

/// PNG bytes of an image, base64 encoded.
pub fn png_base64(image: &RgbImage) -> Result<String> {
    let mut buf = Cursor::new(Vec::new());
    image.write_to(&mut buf, ImageFormat::Png)?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
}

/// Remote embedder: `POST {kind, payload}` answered by `{vector}`.
#[derive(Clone, Debug)]
pub struct EndpointEmbedder {
    pub endpoint: Endpoint,
}

impl EndpointEmbedder {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            endpoint: Endpoint::new(url),
        }
    }

    fn request(&self, kind: &str, payload: String) -> Result<Vec<f64>> {
        let reply = self.endpoint.post_json(&json!({"kind": kind, "payload": payload}))?;
        let vector = reply
            .get("vector")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Schema("$.vector: expected an array".into()))?
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.as_f64()
                    .ok_or_else(|| Error::Schema(format!("$.vector[{i}]: expected a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        normalize(vector)
    }
}

impl Embedder for EndpointEmbedder {
    fn backend_id(&self) -> String {
        format!("endpoint:{}", self.endpoint.url)
    }

    /// Unknown until the first reply.
    fn width(&self) -> usize {
        0
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        self.request("image", png_base64(image)?)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.request("text", text.to_string())
    }
}

/// `100 · cos(a, b)`.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim("similarity", &[a.len()], &[b.len()]));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Parameter("similarity of a zero vector".into()));
    }
    Ok((100.0 * dot / (na * nb)).clamp(-100.0, 100.0))
}

/// Similarity between the final image and the last caption.
pub fn goal_faithfulness(final_image: &RgbImage, last_caption: &str, embedder: &dyn Embedder) -> Result<f64> {
    similarity(&embedder.embed_image(final_image)?, &embedder.embed_text(last_caption)?)
}

/// Mean image-caption similarity over matched pairs.
pub fn step_faithfulness_clip(images: &[RgbImage], captions: &[String], embedder: &dyn Embedder) -> Result<f64> {
    if images.len() != captions.len() {
        return Err(Error::dim("step_faithfulness_clip", &[images.len()], &[captions.len()]));
    }
    if images.is_empty() {
        return Err(Error::Parameter("no steps to score".into()));
    }
    let mut total = 0.0;
    for (img, cap) in images.iter().zip(captions) {
        total += goal_faithfulness(img, cap, embedder)?;
    }
    Ok(total / images.len() as f64)
}

/// Mean l2 distance between consecutive vectors, times 100. Zero for
/// fewer than two vectors.
pub fn consecutive_distance(vectors: &[Vec<f64>]) -> f64 {
    if vectors.len() < 2 {
        return 0.0;
    }
    let sum: f64 = vectors
        .windows(2)
        .map(|w| {
            w[0].iter()
                .zip(&w[1])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    100.0 * sum / (vectors.len() - 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossStepConsistency {
    /// `|raw(generated) − raw(reference)|`.
    pub csc_value: f64,
    pub step_count_diff: usize,
    pub raw_generated: f64,
    pub raw_reference: f64,
}

impl CrossStepConsistency {
    /// Deviation plus step-count difference.
    pub fn reported(&self) -> f64 {
        self.csc_value + self.step_count_diff as f64
    }

    pub fn from_embeddings(generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<Self> {
        if generated.is_empty() || reference.is_empty() {
            return Err(Error::Parameter(
                "cross-step consistency needs non-empty sequences".into(),
            ));
        }
        let raw_generated = consecutive_distance(generated);
        let raw_reference = consecutive_distance(reference);
        Ok(Self {
            csc_value: (raw_generated - raw_reference).abs(),
            step_count_diff: generated.len().abs_diff(reference.len()),
            raw_generated,
            raw_reference,
        })
    }
}

pub fn cross_step_consistency(
    generated: &[RgbImage],
    reference: &[RgbImage],
    embedder: &dyn Embedder,
) -> Result<CrossStepConsistency> {
    let embed = |seq: &[RgbImage]| seq.iter().map(|i| embedder.embed_image(i)).collect::<Result<Vec<_>>>();
    CrossStepConsistency::from_embeddings(&embed(generated)?, &embed(reference)?)
}

/// Which scoring instruction a chat-model request uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    StepFaithfulness,
    IngredientAccuracy,
    Usability,
}

pub const STEP_FAITHFULNESS_TEMPLATE: &str = "You grade one image against one cooking step.
Judge whether the ingredients shown, their shapes, the containers and the cooking state match the step text.
Use five levels: 0 (unrelated), 2.5 (few elements match), 5 (about half match), 7.5 (most match), 10 (everything matches).
Reply with JSON only: {\"score\": <number from 0 to 10>}.";

pub const INGREDIENT_ACCURACY_TEMPLATE: &str = "You grade one image against one cooking step.
List the ingredients the step requires, then check which are visibly present and recognizable in the image.
Score the fraction present on a 0 to 10 scale, lowering the score for ingredients with the wrong color or form.
Reply with JSON only: {\"score\": <number from 0 to 10>}.";

pub const USABILITY_TEMPLATE: &str = "You grade a sequence of step images generated together for one recipe.
Give each aspect 0, 1 or 2 points (fractions allowed):
ISC: all sub-images have the same size and none is badly cropped.
CSR: each sub-image shows one distinct step and can be matched to it.
DIC: sub-images do not repeat the same content or composition.
PCL: the sequence covers the recipe from start to finish in order.
RNS: the number of sub-images equals the number of steps.
Reply with JSON only: {\"ISC\": x, \"CSR\": x, \"DIC\": x, \"PCL\": x, \"RNS\": x}.";

impl TemplateId {
    pub fn text(self) -> &'static str {
        match self {
            TemplateId::StepFaithfulness => STEP_FAITHFULNESS_TEMPLATE,
            TemplateId::IngredientAccuracy => INGREDIENT_ACCURACY_TEMPLATE,
            TemplateId::Usability => USABILITY_TEMPLATE,
        }
    }
}

pub const PER_STEP_SCORE_MAX: f64 = 10.0;
pub const USABILITY_ASPECT_MAX: f64 = 2.0;

/// Usability aspects, each in `[0, 2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[allow(clippy::upper_case_acronyms)]
pub struct UsabilityScores {
    #[serde(rename = "ISC")]
    pub isc: f64,
    #[serde(rename = "CSR")]
    pub csr: f64,
    #[serde(rename = "DIC")]
    pub dic: f64,
    #[serde(rename = "PCL")]
    pub pcl: f64,
    #[serde(rename = "RNS")]
    pub rns: f64,
}

impl UsabilityScores {
    pub const KEYS: [&'static str; 5] = ["ISC", "CSR", "DIC", "PCL", "RNS"];

    /// Sum of the five aspects, in `[0, 10]`.
    pub fn total(&self) -> f64 {
        self.isc + self.csr + self.dic + self.pcl + self.rns
    }
}

fn number_in(v: &Value, key: &str, max: f64) -> Result<f64> {
    let x = v
        .get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::Schema(format!("$.{key}: expected a number")))?;
    if !(0.0..=max).contains(&x) {
        return Err(Error::Schema(format!("$.{key}: {x} outside [0, {max}]")));
    }
    Ok(x)
}

/// Reads `{"score": x}` with `x ∈ [0, 10]`.
pub fn parse_score(reply: &str) -> Result<f64> {
    number_in(&extract_json_object(reply)?, "score", PER_STEP_SCORE_MAX)
}

/// Reads the five usability aspects, each in `[0, 2]`.
pub fn parse_usability(reply: &str) -> Result<UsabilityScores> {
    let v = extract_json_object(reply)?;
    let get = |k| number_in(&v, k, USABILITY_ASPECT_MAX);
    Ok(UsabilityScores {
        isc: get("ISC")?,
        csr: get("CSR")?,
        dic: get("DIC")?,
        pcl: get("PCL")?,
        rns: get("RNS")?,
    })
}

/// Chat-model scoring backend.
#[derive(Clone, Debug, PartialEq)]
pub enum LlmScorer {
    /// Seeded stub: replies are a deterministic function of the seed and
    /// the request, and go through the same parser as live replies.
    Mock {
        seed: u64,
    },
    Live(Endpoint),
}

/// Messages for one scoring request: the template as system message, then
/// the step texts and images as content parts.
pub fn score_messages(template: TemplateId, texts: &[String], images: &[RgbImage]) -> Result<Vec<ChatMessage>> {
    let mut parts = vec![json!({"type": "text", "text": texts.join("\n")})];
    for img in images {
        parts.push(json!({
            "type": "image_url",
            "image_url": {"url": format!("data:image/png;base64,{}", png_base64(img)?)}
        }));
    }
    Ok(vec![
        ChatMessage::system(template.text()),
        ChatMessage::user(Value::Array(parts)),
    ])
}

fn mock_reply(seed: u64, template: TemplateId, messages: &[ChatMessage]) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(serde_json::to_vec(messages).unwrap_or_default());
    let digest = h.finalize();
    let mut rng = ChaCha8Rng::from_seed(digest.into());
    // Quarter-point grid keeps mock replies exactly representable.
    let mut draw = |max: f64| (rng.random_range(0..=(4.0 * max) as u32) as f64) / 4.0;
    match template {
        TemplateId::Usability => {
            let mut obj = serde_json::Map::new();
            for k in UsabilityScores::KEYS {
                obj.insert(k.into(), json!(draw(USABILITY_ASPECT_MAX)));
            }
            Value::Object(obj).to_string()
        }
        _ => json!({"score": draw(PER_STEP_SCORE_MAX)}).to_string(),
    }
}

impl LlmScorer {
    /// Raw reply text for a request.
    pub fn reply(&self, template: TemplateId, messages: Vec<ChatMessage>) -> Result<String> {
        match self {
            LlmScorer::Mock { seed } => Ok(mock_reply(*seed, template, &messages)),
            LlmScorer::Live(endpoint) => endpoint.chat(messages),
        }
    }
}

/// Scores one step (faithfulness or ingredient accuracy) on `[0, 10]`.
pub fn llm_score(template: TemplateId, caption: &str, image: &RgbImage, scorer: &LlmScorer) -> Result<f64> {
    if template == TemplateId::Usability {
        return Err(Error::Parameter(
            "usability is scored per sequence; use llm_usability".into(),
        ));
    }
    let messages = score_messages(template, &[caption.to_string()], std::slice::from_ref(image))?;
    parse_score(&scorer.reply(template, messages)?)
}

/// Scores a whole sequence on the five usability aspects.
pub fn llm_usability(captions: &[String], images: &[RgbImage], scorer: &LlmScorer) -> Result<UsabilityScores> {
    let messages = score_messages(TemplateId::Usability, captions, images)?;
    parse_usability(&scorer.reply(TemplateId::Usability, messages)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmScores {
    /// Mean per-step faithfulness, `[0, 10]`.
    pub sf_g: f64,
    /// Mean per-step ingredient accuracy, `[0, 10]`.
    pub ia: f64,
    pub ub: UsabilityScores,
    pub ub_total: f64,
}

pub fn llm_scores(captions: &[String], images: &[RgbImage], scorer: &LlmScorer) -> Result<LlmScores> {
    if captions.len() != images.len() || images.is_empty() {
        return Err(Error::dim("llm_scores", &[images.len()], &[captions.len()]));
    }
    let mut sf = 0.0;
    let mut ia = 0.0;
    for (c, i) in captions.iter().zip(images) {
        sf += llm_score(TemplateId::StepFaithfulness, c, i, scorer)?;
        ia += llm_score(TemplateId::IngredientAccuracy, c, i, scorer)?;
    }
    let n = images.len() as f64;
    let ub = llm_usability(captions, images, scorer)?;
    Ok(LlmScores {
        sf_g: sf / n,
        ia: ia / n,
        ub,
        ub_total: ub.total(),
    })
}

/// All automatic metrics for one generated sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recipe_id: String,
    pub embedder: String,
    pub goal_faithfulness: f64,
    pub step_faithfulness_clip: f64,
    /// Deviation plus step-count difference.
    pub cross_step_consistency: f64,
    pub csc_value: f64,
    pub step_count_diff: usize,
    pub csc_raw_generated: f64,
    pub csc_raw_reference: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<LlmScores>,
}

/// Computes every embedding metric, plus chat scores when a scorer is given.
pub fn evaluate_sequence(
    recipe_id: &str,
    generated: &[RgbImage],
    captions: &[String],
    reference: &[RgbImage],
    embedder: &dyn Embedder,
    scorer: Option<&LlmScorer>,
) -> Result<MetricReport> {
    let (last_image, last_caption) = match (generated.last(), captions.last()) {
        (Some(i), Some(c)) => (i, c),
        _ => return Err(Error::Parameter("empty sequence".into())),
    };
    let gf = goal_faithfulness(last_image, last_caption, embedder)?;
    let n = generated.len().min(captions.len());
    let sf = step_faithfulness_clip(&generated[..n], &captions[..n], embedder)?;
    let csc = cross_step_consistency(generated, reference, embedder)?;
    let llm = match scorer {
        Some(s) => Some(llm_scores(&captions[..n], &generated[..n], s)?),
        None => None,
    };
    Ok(MetricReport {
        recipe_id: recipe_id.to_string(),
        embedder: embedder.backend_id(),
        goal_faithfulness: gf,
        step_faithfulness_clip: sf,
        cross_step_consistency: csc.reported(),
        csc_value: csc.csc_value,
        step_count_diff: csc.step_count_diff,
        csc_raw_generated: csc.raw_generated,
        csc_raw_reference: csc.raw_reference,
        llm,
    })
}

/// Corpus means of the per-recipe reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub count: usize,
    pub goal_faithfulness: f64,
    pub step_faithfulness_clip: f64,
    pub cross_step_consistency: f64,
    pub csc_value: f64,
    pub step_count_diff: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<LlmScores>,
}

pub fn aggregate(reports: &[MetricReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::Parameter("nothing to aggregate".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let llm = if reports.iter().all(|r| r.llm.is_some()) {
        let l = |f: &dyn Fn(&LlmScores) -> f64| mean(&|r| f(r.llm.as_ref().expect("checked")));
        let ub = UsabilityScores {
            isc: l(&|s| s.ub.isc),
            csr: l(&|s| s.ub.csr),
            dic: l(&|s| s.ub.dic),
            pcl: l(&|s| s.ub.pcl),
            rns: l(&|s| s.ub.rns),
        };
        Some(LlmScores {
            sf_g: l(&|s| s.sf_g),
            ia: l(&|s| s.ia),
            ub,
            ub_total: l(&|s| s.ub_total),
        })
    } else {
        None
    };
    Ok(AggregateReport {
        count: reports.len(),
        goal_faithfulness: mean(&|r| r.goal_faithfulness),
        step_faithfulness_clip: mean(&|r| r.step_faithfulness_clip),
        cross_step_consistency: mean(&|r| r.cross_step_consistency),
        csc_value: mean(&|r| r.csc_value),
        step_count_diff: mean(&|r| r.step_count_diff as f64),
        llm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::test_server::serve;

    fn noise_image(seed: u64, w: u32, h: u32) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]))
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn similarity_endpoints() {
        assert!((similarity(&[0.6, 0.8], &[0.6, 0.8]).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn toy_goal_faithfulness_matches_cosine_oracle() {
        let e = ToyEmbedder::new(0);
        let img = noise_image(1, 20, 12);
        let a = e.embed_image(&img).unwrap();
        let b = e.embed_text("[step-3] add red circle").unwrap();
        assert!((dot(&a, &a) - 1.0).abs() < 1e-12);
        let oracle = 100.0 * dot(&a, &b) / (dot(&a, &a).sqrt() * dot(&b, &b).sqrt());
        let got = goal_faithfulness(&img, "[step-3] add red circle", &e).unwrap();
        assert!((got - oracle).abs() < 1e-9);
        assert_eq!(e.embed_image(&img).unwrap(), a);
    }

    #[test]
    fn step_faithfulness_is_mean_and_permutation_invariant() {
        let e = ToyEmbedder::new(2);
        let imgs: Vec<_> = (0..4).map(|s| noise_image(s, 8, 8)).collect();
        let caps: Vec<String> = ["a red circle", "blue square", "stir eggs", "plate it"]
            .map(String::from)
            .to_vec();
        let sf = step_faithfulness_clip(&imgs, &caps, &e).unwrap();
        let oracle: f64 = imgs
            .iter()
            .zip(&caps)
            .map(|(i, c)| 100.0 * dot(&e.embed_image(i).unwrap(), &e.embed_text(c).unwrap()))
            .sum::<f64>()
            / 4.0;
        assert!((sf - oracle).abs() < 1e-9);
        let order = [2, 0, 3, 1];
        let pi: Vec<_> = order.iter().map(|&k| imgs[k].clone()).collect();
        let pc: Vec<_> = order.iter().map(|&k| caps[k].clone()).collect();
        assert!((step_faithfulness_clip(&pi, &pc, &e).unwrap() - sf).abs() < 1e-9);
        let one = step_faithfulness_clip(&imgs[..1], &caps[..1], &e).unwrap();
        assert_eq!(one, goal_faithfulness(&imgs[0], &caps[0], &e).unwrap());
        assert!(step_faithfulness_clip(&imgs, &caps[..2], &e).is_err());
    }

    #[test]
    fn csc_self_and_count_difference() {
        let e = ToyEmbedder::new(0);
        let g: Vec<_> = (0..4).map(|s| noise_image(s, 8, 8)).collect();
        let c = cross_step_consistency(&g, &g, &e).unwrap();
        assert_eq!((c.csc_value, c.step_count_diff), (0.0, 0));
        let v: Vec<Vec<f64>> = (0..6).map(|k| vec![k as f64, 0.0]).collect();
        let r: Vec<Vec<f64>> = (0..4).map(|k| vec![0.0, k as f64]).collect();
        let c = CrossStepConsistency::from_embeddings(&v, &r).unwrap();
        assert_eq!(c.step_count_diff, 2);
        assert!(c.csc_value.abs() < 1e-12);
        assert_eq!(consecutive_distance(&v[..1]), 0.0);
    }

    #[test]
    fn csc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seq = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..7).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let (g, r) = (seq(5), seq(3));
        let raw = |s: &[Vec<f64>]| {
            let mut total = 0.0;
            for w in s.windows(2) {
                let d: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| (b - a).powi(2)).sum();
                total += d.sqrt();
            }
            100.0 * total / (s.len() - 1) as f64
        };
        let c = CrossStepConsistency::from_embeddings(&g, &r).unwrap();
        assert!((c.csc_value - (raw(&g) - raw(&r)).abs()).abs() < 1e-9);
        assert!((c.reported() - c.csc_value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn re_encoding_preserves_metrics() {
        let e = ToyEmbedder::new(0);
        let img = noise_image(3, 16, 16);
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(png_base64(&img).unwrap())
            .unwrap();
        let back = image::load_from_memory(&bytes).unwrap().to_rgb8();
        assert_eq!(e.embed_image(&img).unwrap(), e.embed_image(&back).unwrap());
    }

    #[test]
    fn mock_scores_are_deterministic_and_valid() {
        let s = LlmScorer::Mock { seed: 7 };
        let imgs: Vec<_> = (0..3).map(|k| noise_image(k, 8, 8)).collect();
        let caps: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let a = llm_scores(&caps, &imgs, &s).unwrap();
        assert_eq!(a, llm_scores(&caps, &imgs, &s).unwrap());
        assert!((0.0..=10.0).contains(&a.sf_g) && (0.0..=10.0).contains(&a.ia));
        assert!((a.ub_total - a.ub.total()).abs() < 1e-12 && a.ub_total <= 10.0);
    }

    #[test]
    fn score_parser_rejects_out_of_range() {
        assert_eq!(parse_score("{\"score\": 7.5}").unwrap(), 7.5);
        for bad in [
            "{\"score\": 11}",
            "{\"score\": -1}",
            "{\"score\": \"7\"}",
            "{}",
            "seven",
        ] {
            assert!(matches!(parse_score(bad), Err(Error::Schema(_))), "{bad}");
        }
        assert!(parse_usability("{\"ISC\":2,\"CSR\":1,\"DIC\":1,\"PCL\":0,\"RNS\":2.5}").is_err());
        let u = parse_usability("{\"ISC\":2,\"CSR\":1,\"DIC\":1,\"PCL\":0,\"RNS\":1.5}").unwrap();
        assert_eq!(u.total(), 5.5);
    }

    #[test]
    fn endpoint_embedder_roundtrip() {
        let (url, rx) = serve(vec![
            (200, "{\"vector\": [3.0, 4.0]}".into()),
            (200, "{\"vec\": []}".into()),
        ]);
        let e = EndpointEmbedder::new(url);
        assert_eq!(e.embed_text("hello").unwrap(), vec![0.6, 0.8]);
        let body: Value = serde_json::from_str(&rx.recv().unwrap().body).unwrap();
        assert_eq!(body, json!({"kind": "text", "payload": "hello"}));
        assert!(matches!(e.embed_text("x"), Err(Error::Schema(_))));
    }

    #[test]
    fn aggregate_is_mean() {
        let e = ToyEmbedder::new(0);
        let caps: Vec<String> = ["add red circle", "add blue square"].map(String::from).to_vec();
        let reports: Vec<_> = (0..3)
            .map(|s| {
                let g: Vec<_> = (0..2).map(|k| noise_image(10 * s + k, 8, 8)).collect();
                let r: Vec<_> = (0..3).map(|k| noise_image(100 + k, 8, 8)).collect();
                evaluate_sequence(&format!("r{s}"), &g, &caps, &r, &e, Some(&LlmScorer::Mock { seed: 0 })).unwrap()
            })
            .collect();
        let agg = aggregate(&reports).unwrap();
        let gf: f64 = reports.iter().map(|r| r.goal_faithfulness).sum::<f64>() / 3.0;
        assert!((agg.goal_faithfulness - gf).abs() < 1e-12);
        assert_eq!(agg.step_count_diff, 1.0);
        assert!(agg.llm.is_some());
    }
}
