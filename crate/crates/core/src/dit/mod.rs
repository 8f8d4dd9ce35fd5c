//! Miniature diffusion transformer: configuration, model, pixel patch
//! codec, rectified-flow sampler, trainer, synthetic data and checkpoints.

mod checkpoint;
mod data;
mod model;
mod output;
mod patch;
mod sampler;
mod train;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use data::{make_synthetic_dataset, render_sequence, Primitive, Shape, SyntheticRecipe, BACKGROUND, COLORS};
pub use model::{dit_block_on_tape, timestep_embedding, BlockParams, Conditioning, DitModel, DitParams, DitVars};
pub use output::{
    convert_channels, image_to_tensor, load_outputs, step_file_name, tensor_to_image, write_outputs, GenerationOutput,
    Manifest, MANIFEST_FILE, STRIP_FILE,
};
pub use patch::{patchify, unpatchify, CodecMode, PatchCodec};
pub use sampler::{
    denoise_step, denoise_step_on_tape, euler_update, integrate, predict_velocity, predict_velocity_on_tape, sample,
    sample_with, LatentSequence, PreparedPrompt, SampleResult, SamplerState,
};
pub use train::{
    evaluation_loss, evaluation_loss_with, flow_matching_loss, flow_matching_value, prepare_examples, train,
    train_with, Adam, LossPoint, TrainOptions, TrainReport, TrainingExample,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cscc::DEFAULT_LAMBDA;
use crate::error::{Error, Result};
use crate::layout::RegionLayout;
use crate::regional::RegionalMask;
use crate::rope::{RopeMode, DEFAULT_ROPE_BASE};
use crate::text::EncoderKind;

pub const DEFAULT_ALPHA: f64 = 0.1;

/// When the whole-description pass is fused in.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionSchedule {
    #[default]
    Every,
    /// Only at these sampler step indices; other steps use the regional
    /// prediction alone.
    Steps(Vec<usize>),
}

impl FusionSchedule {
    pub fn active(&self, step: usize) -> bool {
        match self {
            FusionSchedule::Every => true,
            FusionSchedule::Steps(s) => s.contains(&step),
        }
    }
}

/// Architecture, sampling and ablation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding width `d`; must equal `heads * head_dim`.
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub region_height: usize,
    pub region_width: usize,
    pub channels: usize,
    pub rope_base: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub sampler_steps: usize,
    pub seed: u64,
    pub max_regions: usize,
    pub text_encoder: EncoderKind,
    pub text_seed: u64,
    pub regional_mask: RegionalMask,
    pub regional_rope: RopeMode,
    pub base_rope: RopeMode,
    /// Cross-step context fusion of step tokens.
    pub cscc: bool,
    pub fusion: FusionSchedule,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            heads: 4,
            head_dim: 32,
            depth: 4,
            mlp_ratio: 4,
            patch_size: 8,
            region_height: 32,
            region_width: 32,
            channels: 3,
            rope_base: DEFAULT_ROPE_BASE,
            alpha: DEFAULT_ALPHA,
            lambda: DEFAULT_LAMBDA,
            sampler_steps: 16,
            seed: 0,
            max_regions: 12,
            text_encoder: EncoderKind::ContextMixing,
            text_seed: 0,
            regional_mask: RegionalMask::StepRegional,
            regional_rope: RopeMode::Flexible,
            base_rope: RopeMode::Flexible,
            cscc: true,
            fusion: FusionSchedule::Every,
        }
    }
}

#[derive(Serialize)]
struct ArchitectureKey<'a> {
    hidden: usize,
    heads: usize,
    head_dim: usize,
    depth: usize,
    mlp_ratio: usize,
    patch_size: usize,
    region_height: usize,
    region_width: usize,
    channels: usize,
    text_encoder: &'a EncoderKind,
    text_seed: u64,
}

impl ModelConfig {
    /// A very small configuration for unit tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            hidden: 8,
            heads: 2,
            head_dim: 4,
            depth: 2,
            mlp_ratio: 2,
            patch_size: 2,
            region_height: 4,
            region_width: 4,
            channels: 1,
            sampler_steps: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Parameter(m));
        if self.heads == 0 || self.hidden != self.heads * self.head_dim {
            return fail(format!(
                "hidden ({}) must equal heads ({}) x head_dim ({})",
                self.hidden, self.heads, self.head_dim
            ));
        }
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return fail(format!("head_dim must be even, got {}", self.head_dim));
        }
        if self.patch_size == 0
            || !self.region_height.is_multiple_of(self.patch_size)
            || !self.region_width.is_multiple_of(self.patch_size)
            || self.region_height == 0
            || self.region_width == 0
        {
            return fail(format!(
                "region {}x{} is not divisible by patch size {}",
                self.region_height, self.region_width, self.patch_size
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.sampler_steps == 0 {
            return fail("sampler_steps must be at least 1".into());
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.channels == 0 {
            return fail("depth, mlp_ratio and channels must be positive".into());
        }
        if self.max_regions == 0 {
            return fail("max_regions must be positive".into());
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.region_height / self.patch_size,
            self.region_width / self.patch_size,
        )
    }

    pub fn tokens_per_region(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn layout(&self, regions: usize) -> Result<RegionLayout> {
        if regions > self.max_regions {
            return Err(Error::Capacity(format!(
                "{regions} steps exceed the configured maximum of {} regions",
                self.max_regions
            )));
        }
        let (h, w) = self.grid();
        RegionLayout::uniform(regions, h, w)
    }

    /// SHA-256 over the fields that determine parameter shapes and text
    /// encodings. Sampling knobs are excluded.
    pub fn architecture_hash(&self) -> String {
        let key = ArchitectureKey {
            hidden: self.hidden,
            heads: self.heads,
            head_dim: self.head_dim,
            depth: self.depth,
            mlp_ratio: self.mlp_ratio,
            patch_size: self.patch_size,
            region_height: self.region_height,
            region_width: self.region_width,
            channels: self.channels,
            text_encoder: &self.text_encoder,
            text_seed: self.text_seed,
        };
        let bytes = serde_json::to_vec(&key).expect("serializable");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.alpha, 0.1);
        assert_eq!(c.lambda, 0.2);
        assert_eq!(c.tokens_per_region(), 16);
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            ModelConfig {
                hidden: 100,
                ..ModelConfig::default()
            },
            ModelConfig {
                patch_size: 5,
                ..ModelConfig::default()
            },
            ModelConfig {
                alpha: 1.5,
                ..ModelConfig::default()
            },
            ModelConfig {
                lambda: -0.1,
                ..ModelConfig::default()
            },
            ModelConfig {
                sampler_steps: 0,
                ..ModelConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn hash_ignores_sampling_knobs() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            alpha: 0.5,
            sampler_steps: 3,
            ..a.clone()
        };
        assert_eq!(a.architecture_hash(), b.architecture_hash());
        let c = ModelConfig { depth: 2, ..a.clone() };
        assert_ne!(a.architecture_hash(), c.architecture_hash());
    }

    #[test]
    fn too_many_regions_is_capacity_error() {
        let c = ModelConfig::default();
        assert!(matches!(c.layout(13), Err(Error::Capacity(_))));
        assert_eq!(c.layout(3).unwrap().total_tokens(), 48);
    }
}
