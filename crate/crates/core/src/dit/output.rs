//! PNG output and the generation manifest.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::sampler::SampleResult;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::RecipeSpec;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STRIP_FILE: &str = "strip.png";

/// What produced a generated sequence and where its files are.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub recipe: RecipeSpec,
    pub seed: u64,
    pub alpha: f64,
    pub lambda: f64,
    /// Sampler times from `1` down to `0`.
    pub schedule: Vec<f64>,
    /// Only the whole-description pass contributed (`α = 1`).
    #[serde(default)]
    pub base_only: bool,
    /// Only the regional pass contributed (`α = 0` or fusion never active).
    #[serde(default)]
    pub regional_only: bool,
    /// Image files relative to the manifest, one per step.
    pub per_step_files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strip_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
}

impl Manifest {
    pub fn new(recipe: &RecipeSpec, seed: u64, config: &ModelConfig, schedule: Vec<f64>) -> Self {
        Self {
            recipe: recipe.clone(),
            seed,
            alpha: config.alpha,
            lambda: config.lambda,
            base_only: config.alpha == 1.0,
            regional_only: config.alpha == 0.0
                || (0..schedule.len().saturating_sub(1)).all(|k| !config.fusion.active(k)),
            schedule,
            per_step_files: Vec::new(),
            strip_file: None,
            architecture_hash: Some(config.architecture_hash()),
            config: Some(config.clone()),
        }
    }

    /// Reads `manifest.json` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Converts an `H × W × C` tensor with values in `[-1, 1]` to RGB. One
/// channel is replicated to gray.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let &[h, w, c] = t.shape() else {
        return Err(Error::dim("tensor_to_image", t.shape(), &[0, 0, 3]));
    };
    if c != 1 && c != 3 {
        return Err(Error::dim("tensor_to_image channels", t.shape(), &[h, w, 3]));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let v = &t.data()[i * c..(i + 1) * c];
        px.0 = if c == 1 {
            [to_byte(v[0]); 3]
        } else {
            [to_byte(v[0]), to_byte(v[1]), to_byte(v[2])]
        };
    }
    Ok(img)
}

/// Inverse of [`tensor_to_image`] up to quantization. With one channel the
/// RGB mean is kept.
pub fn image_to_tensor(img: &RgbImage, channels: usize) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity(w as usize * h as usize * channels);
    for px in img.pixels() {
        let v = px.0.map(|b| b as f64 / 127.5 - 1.0);
        match channels {
            1 => data.push((v[0] + v[1] + v[2]) / 3.0),
            3 => data.extend_from_slice(&v),
            _ => return Err(Error::Parameter(format!("unsupported channel count {channels}"))),
        }
    }
    Tensor::new(vec![h as usize, w as usize, channels], data)
}

/// Converts an `H × W × C` tensor between 1 and 3 channels.
pub fn convert_channels(t: &Tensor, channels: usize) -> Result<Tensor> {
    let &[h, w, c] = t.shape() else {
        return Err(Error::dim("convert_channels", t.shape(), &[0, 0, channels]));
    };
    match (c, channels) {
        (a, b) if a == b => Ok(t.clone()),
        (3, 1) => {
            let data = t.data().chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
            Tensor::new(vec![h, w, 1], data)
        }
        (1, 3) => {
            let data = t.data().iter().flat_map(|&v| [v; 3]).collect();
            Tensor::new(vec![h, w, 3], data)
        }
        _ => Err(Error::dim("convert_channels", t.shape(), &[h, w, channels])),
    }
}

/// Files written for one generation.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationOutput {
    pub dir: PathBuf,
    pub step_files: Vec<PathBuf>,
    pub strip_file: PathBuf,
    pub manifest_file: PathBuf,
    pub manifest: Manifest,
}

pub fn step_file_name(k: usize) -> String {
    format!("step_{:02}.png", k + 1)
}

/// Writes one PNG per step, the stacked strip and `manifest.json`.
pub fn write_outputs(dir: &Path, result: &SampleResult) -> Result<GenerationOutput> {
    fs::create_dir_all(dir)?;
    let mut manifest = result.manifest.clone();
    manifest.per_step_files.clear();
    let mut step_files = Vec::with_capacity(result.images.len());
    for (k, img) in result.images.iter().enumerate() {
        let name = step_file_name(k);
        let path = dir.join(&name);
        tensor_to_image(img)?.save(&path)?;
        manifest.per_step_files.push(name);
        step_files.push(path);
    }
    let strip_file = dir.join(STRIP_FILE);
    tensor_to_image(&result.strip()?)?.save(&strip_file)?;
    manifest.strip_file = Some(STRIP_FILE.to_string());
    let manifest_file = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Schema(e.to_string()))?;
    fs::write(&manifest_file, json)?;
    Ok(GenerationOutput {
        dir: dir.to_path_buf(),
        step_files,
        strip_file,
        manifest_file,
        manifest,
    })
}

/// Loads the manifest of `dir` and its per-step images in order.
pub fn load_outputs(dir: &Path) -> Result<(Manifest, Vec<RgbImage>)> {
    let manifest = Manifest::load(dir)?;
    let images = manifest
        .per_step_files
        .iter()
        .map(|f| Ok(image::open(dir.join(f))?.to_rgb8()))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, images))
}
