//! Pixel patches stand in for autoencoder latents.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Linear;
use crate::tensor::{self, GradTape, Tensor};

/// Splits an `H × W × C` image into `(H/p)(W/p)` row-major patches of
/// `p·p·C` values each, laid out `(row, col, channel)` inside the patch.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let [h, w, c] = image_dims(image)?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::dim("patchify", image.shape(), &[p]));
    }
    let (gh, gw) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                let row = (gy * p + py) * w;
                let start = (row + gx * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Tensor::matrix(gh * gw, p * p * c, out)
}

/// Inverse of [`patchify`] for a `grid_h × grid_w` patch grid.
pub fn unpatchify(tokens: &Tensor, grid_h: usize, grid_w: usize, p: usize, channels: usize) -> Result<Tensor> {
    if tokens.rows() != grid_h * grid_w || tokens.cols() != p * p * channels {
        return Err(Error::dim(
            "unpatchify",
            tokens.shape(),
            &[grid_h * grid_w, p * p * channels],
        ));
    }
    let (h, w) = (grid_h * p, grid_w * p);
    let mut out = vec![0.0; h * w * channels];
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let patch = tokens.row(gy * grid_w + gx);
            for py in 0..p {
                let row = (gy * p + py) * w;
                let start = (row + gx * p) * channels;
                out[start..start + p * channels].copy_from_slice(&patch[py * p * channels..(py + 1) * p * channels]);
            }
        }
    }
    Tensor::new(vec![h, w, channels], out)
}

fn image_dims(image: &Tensor) -> Result<[usize; 3]> {
    match image.shape() {
        &[h, w, c] => Ok([h, w, c]),
        other => Err(Error::dim("image", other, &[0, 0, 0])),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    /// Latents are the raw patches.
    #[default]
    Identity,
    Learned,
}

/// Maps patches to latent tokens and back.
#[derive(Clone, Debug, PartialEq)]
pub enum PatchCodec {
    Identity,
    Learned { encoder: Linear, decoder: Linear },
}

impl PatchCodec {
    pub fn learned<R: rand::Rng + ?Sized>(patch_dim: usize, rng: &mut R) -> Self {
        PatchCodec::Learned {
            encoder: Linear::init(patch_dim, patch_dim, 1.0, rng),
            decoder: Linear::init(patch_dim, patch_dim, 1.0, rng),
        }
    }

    pub fn mode(&self) -> CodecMode {
        match self {
            PatchCodec::Identity => CodecMode::Identity,
            PatchCodec::Learned { .. } => CodecMode::Learned,
        }
    }

    pub fn encode(&self, patches: &Tensor) -> Result<Tensor> {
        match self {
            PatchCodec::Identity => Ok(patches.clone()),
            PatchCodec::Learned { encoder, .. } => encoder.forward(patches),
        }
    }

    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        match self {
            PatchCodec::Identity => Ok(latents.clone()),
            PatchCodec::Learned { decoder, .. } => decoder.forward(latents),
        }
    }

    pub fn reconstruction_error(&self, patches: &Tensor) -> Result<f64> {
        tensor::mse(&self.decode(&self.encode(patches)?)?, patches)
    }

    /// Plain gradient descent on reconstruction MSE; returns the error
    /// before each step. No-op for the identity codec.
    pub fn fit(&mut self, patches: &Tensor, steps: usize, lr: f64) -> Result<Vec<f64>> {
        let PatchCodec::Learned { encoder, decoder } = self else {
            return Ok(Vec::new());
        };
        let mut curve = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut tape = GradTape::new();
            let x = tape.leaf(patches.clone());
            let e = encoder.map("enc", &mut |_, t| tape.leaf(t.clone()));
            let d = decoder.map("dec", &mut |_, t| tape.leaf(t.clone()));
            let z = e.forward(&mut tape, x)?;
            let y = d.forward(&mut tape, z)?;
            let loss = tape.mse(y, x)?;
            curve.push(tape.value(loss).item());
            let g = tape.gradient(loss)?;
            for (param, var) in [
                (&mut encoder.w, e.w),
                (&mut encoder.b, e.b),
                (&mut decoder.w, d.w),
                (&mut decoder.b, d.b),
            ] {
                let grad = g.wrt(var);
                for (p, gv) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p -= lr * gv;
                }
            }
        }
        Ok(curve)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patch_count_and_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::randn(&[8, 8, 3], 1.0, &mut rng);
        let tokens = patchify(&img, 4).unwrap();
        assert_eq!(tokens.shape(), &[4, 48]);
        assert!(unpatchify(&tokens, 2, 2, 4, 3).unwrap().bit_eq(&img));
        let codec = PatchCodec::Identity;
        assert!(codec.decode(&codec.encode(&tokens).unwrap()).unwrap().bit_eq(&tokens));
    }

    #[test]
    fn patch_holds_its_pixels() {
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let img = Tensor::new(vec![4, 4, 1], data).unwrap();
        let t = patchify(&img, 2).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(t.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn non_divisible_is_rejected() {
        assert!(patchify(&Tensor::zeros(&[6, 8, 1]), 4).is_err());
        assert!(unpatchify(&Tensor::zeros(&[3, 4]), 2, 2, 2, 1).is_err());
    }

    #[test]
    fn learned_codec_error_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patches = Tensor::randn(&[32, 12], 1.0, &mut rng);
        let mut codec = PatchCodec::learned(12, &mut rng);
        let curve = codec.fit(&patches, 200, 0.05).unwrap();
        let after = codec.reconstruction_error(&patches).unwrap();
        assert!(after < 0.25 * curve[0], "{} -> {after}", curve[0]);
    }
}
