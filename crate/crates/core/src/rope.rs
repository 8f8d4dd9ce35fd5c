//! Two-dimensional rotary position embeddings.
//!
//! A head of width `head_dim` holds `head_dim / 2` channel pairs. The first
//! half of the pairs is rotated by the row index, the second half by the
//! column index, each axis with geometrically spaced frequencies.
//!
//! Two position schemes are provided for stacked regions:
//! - *original*: one global frame, region `n` starts at row
//!   `Σ_{m<n} height_m`;
//! - *flexible*: every region restarts at `(0, 0)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{RegionCoordinates, RegionLayout};
use crate::tensor::{rotate_pairs, PairRotation, Tensor};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Which coordinate frame latent tokens are rotated in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RopeMode {
    Original,
    #[default]
    Flexible,
}

/// Cached rotation coefficients for one head width.
#[derive(Clone, Debug)]
pub struct RotationTable {
    head_dim: usize,
    base: f64,
    row_pairs: usize,
    freqs: Vec<f64>,
    // [position][pair] for positions below `cached`
    cos_cache: Vec<f64>,
    sin_cache: Vec<f64>,
    cached: usize,
}

impl RotationTable {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        Self::with_cache(head_dim, base, 64)
    }

    pub fn with_cache(head_dim: usize, base: f64, cached_positions: usize) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::dim("RotationTable", &[head_dim], &[2]));
        }
        if base.is_nan() || base <= 1.0 {
            return Err(Error::Parameter(format!("rope base must exceed 1, got {base}")));
        }
        let pairs = head_dim / 2;
        let row_pairs = pairs - pairs / 2;
        let col_pairs = pairs / 2;
        let axis_freqs = |n: usize| (0..n).map(move |k| base.powf(-(k as f64) / n as f64));
        let freqs: Vec<f64> = axis_freqs(row_pairs).chain(axis_freqs(col_pairs)).collect();
        let mut cos_cache = Vec::with_capacity(cached_positions * pairs);
        let mut sin_cache = Vec::with_capacity(cached_positions * pairs);
        for p in 0..cached_positions {
            for f in &freqs {
                let a = p as f64 * f;
                cos_cache.push(a.cos());
                sin_cache.push(a.sin());
            }
        }
        Ok(Self {
            head_dim,
            base,
            row_pairs,
            freqs,
            cos_cache,
            sin_cache,
            cached: cached_positions,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn pairs(&self) -> usize {
        self.head_dim / 2
    }

    fn coefficient(&self, pos: usize, pair: usize) -> (f64, f64) {
        if pos < self.cached {
            let k = pos * self.pairs() + pair;
            (self.cos_cache[k], self.sin_cache[k])
        } else {
            let a = pos as f64 * self.freqs[pair];
            (a.cos(), a.sin())
        }
    }

    /// `(cos, sin)` for every pair at grid cell `(i, j)`.
    pub fn coefficients(&self, i: usize, j: usize) -> (Vec<f64>, Vec<f64>) {
        (0..self.pairs())
            .map(|k| {
                let pos = if k < self.row_pairs { i } else { j };
                self.coefficient(pos, k)
            })
            .unzip()
    }

    /// Rotation for a list of per-token positions.
    pub fn pair_rotation(&self, positions: &[(usize, usize)]) -> PairRotation {
        let mut rot = PairRotation {
            rows: positions.len(),
            pairs: self.pairs(),
            cos: Vec::with_capacity(positions.len() * self.pairs()),
            sin: Vec::with_capacity(positions.len() * self.pairs()),
        };
        for &(i, j) in positions {
            let (c, s) = self.coefficients(i, j);
            rot.cos.extend(c);
            rot.sin.extend(s);
        }
        rot
    }
}

/// Rotates a single head-width token by grid position `(i, j)`.
pub fn rotate_token(token: &[f64], i: usize, j: usize, table: &RotationTable) -> Result<Vec<f64>> {
    if !token.len().is_multiple_of(2) || token.len() != table.head_dim() {
        return Err(Error::dim("rotate_token", &[token.len()], &[table.head_dim()]));
    }
    let (cos, sin) = table.coefficients(i, j);
    let mut out = token.to_vec();
    for k in 0..table.pairs() {
        let (x0, x1) = (token[2 * k], token[2 * k + 1]);
        out[2 * k] = x0 * cos[k] - x1 * sin[k];
        out[2 * k + 1] = x0 * sin[k] + x1 * cos[k];
    }
    Ok(out)
}

/// Global-frame positions for every latent token of a stacked layout.
pub fn original_positions(layout: &RegionLayout) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(layout.total_tokens());
    for (n, region) in layout.regions().iter().enumerate() {
        let offset = layout.row_offset(n);
        out.extend((0..region.token_count()).map(|t| {
            let (i, j) = region.local(t);
            (offset + i, j)
        }));
    }
    out
}

fn validate_regions(coords: &[RegionCoordinates]) -> Result<()> {
    for (n, c) in coords.iter().enumerate() {
        if c.region_index != n {
            return Err(Error::InvalidLayout(format!(
                "regions must be ordered and distinct: position {n} holds region {}",
                c.region_index
            )));
        }
        if c.token_count() == 0 {
            return Err(Error::InvalidLayout(format!("region {n} is empty")));
        }
    }
    Ok(())
}

/// Region-local positions: every region restarts at `(0, 0)`.
pub fn flexible_positions(coords: &[RegionCoordinates]) -> Result<Vec<(usize, usize)>> {
    validate_regions(coords)?;
    Ok(coords
        .iter()
        .flat_map(|c| (0..c.token_count()).map(move |t| c.local(t)))
        .collect())
}

/// Positions for the latent part of a layout under `mode`.
pub fn latent_positions(layout: &RegionLayout, mode: RopeMode) -> Result<Vec<(usize, usize)>> {
    match mode {
        RopeMode::Original => Ok(original_positions(layout)),
        RopeMode::Flexible => flexible_positions(layout.regions()),
    }
}

/// Rotation for a joint `[text; latents]` sequence. Text tokens sit at the
/// origin, which is the identity rotation.
pub fn joint_rotation(
    table: &RotationTable,
    text_tokens: usize,
    layout: &RegionLayout,
    mode: RopeMode,
) -> Result<Arc<PairRotation>> {
    let mut positions = vec![(0, 0); text_tokens];
    positions.extend(latent_positions(layout, mode)?);
    Ok(Arc::new(table.pair_rotation(&positions)))
}

fn check_tokens(latents: &Tensor, expected: usize) -> Result<()> {
    if latents.rows() != expected {
        return Err(Error::dim("rope", latents.shape(), &[expected]));
    }
    Ok(())
}

/// Rotates latents (width a multiple of `head_dim`) in the global frame.
pub fn apply_original_rope(latents: &Tensor, layout: &RegionLayout, table: &RotationTable) -> Result<Tensor> {
    check_tokens(latents, layout.total_tokens())?;
    rotate_pairs(latents, &table.pair_rotation(&original_positions(layout)), false)
}

/// Rotates latents with coordinates reset per region; the output keeps the
/// region 1..N concatenation order.
pub fn apply_flexible_rope(latents: &Tensor, coords: &[RegionCoordinates], table: &RotationTable) -> Result<Tensor> {
    let positions = flexible_positions(coords)?;
    check_tokens(latents, positions.len())?;
    rotate_pairs(latents, &table.pair_rotation(&positions), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{concat_rows, slice_rows};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn randv(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        Tensor::randn(&[n], 1.0, rng).into_data()
    }

    #[test]
    fn table_rejects_odd_width() {
        assert!(RotationTable::new(7, DEFAULT_ROPE_BASE).is_err());
        let t = RotationTable::new(8, DEFAULT_ROPE_BASE).unwrap();
        assert!(rotate_token(&[1.0; 6], 0, 0, &t).is_err());
    }

    #[test]
    fn coefficients_are_orthonormal() {
        let t = RotationTable::with_cache(16, DEFAULT_ROPE_BASE, 4).unwrap();
        for (i, j) in [(0, 0), (3, 1), (17, 250)] {
            let (c, s) = t.coefficients(i, j);
            for k in 0..c.len() {
                assert!((c[k] * c[k] + s[k] * s[k] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn origin_is_identity_and_norm_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = RotationTable::new(32, DEFAULT_ROPE_BASE).unwrap();
        let v = randv(32, &mut rng);
        assert_eq!(rotate_token(&v, 0, 0, &t).unwrap(), v);
        for _ in 0..50 {
            let (i, j) = (rng.random_range(0..100), rng.random_range(0..100));
            let r = rotate_token(&v, i, j, &t).unwrap();
            assert!((dot(&r, &r).sqrt() - dot(&v, &v).sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn logits_depend_only_on_relative_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = RotationTable::new(16, DEFAULT_ROPE_BASE).unwrap();
        for _ in 0..50 {
            let (q, k) = (randv(16, &mut rng), randv(16, &mut rng));
            let p1 = (rng.random_range(0..20), rng.random_range(0..20));
            let p2 = (rng.random_range(0..20), rng.random_range(0..20));
            let d = (rng.random_range(0..30), rng.random_range(0..30));
            let base = dot(
                &rotate_token(&q, p1.0, p1.1, &t).unwrap(),
                &rotate_token(&k, p2.0, p2.1, &t).unwrap(),
            );
            let shifted = dot(
                &rotate_token(&q, p1.0 + d.0, p1.1 + d.1, &t).unwrap(),
                &rotate_token(&k, p2.0 + d.0, p2.1 + d.1, &t).unwrap(),
            );
            assert!((base - shifted).abs() < 1e-9);
        }
    }

    #[test]
    fn stacked_rows_are_offset() {
        let layout = RegionLayout::uniform(2, 2, 3).unwrap();
        let pos = original_positions(&layout);
        let rows: std::collections::BTreeSet<_> = pos[6..].iter().map(|p| p.0).collect();
        assert_eq!(rows.into_iter().collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn original_matches_per_token_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = RotationTable::new(8, DEFAULT_ROPE_BASE).unwrap();
        let layout = RegionLayout::uniform(3, 2, 2).unwrap();
        // two heads
        let x = Tensor::randn(&[12, 16], 1.0, &mut rng);
        let got = apply_original_rope(&x, &layout, &t).unwrap();
        for (n, region) in layout.regions().iter().enumerate() {
            for local in 0..region.token_count() {
                let tok = layout.token_offset(n) + local;
                let (i, j) = region.local(local);
                for h in 0..2 {
                    let chunk = &x.row(tok)[h * 8..(h + 1) * 8];
                    let want = rotate_token(chunk, i + 2 * n, j, &t).unwrap();
                    assert_eq!(&got.row(tok)[h * 8..(h + 1) * 8], want.as_slice());
                }
            }
        }
    }

    #[test]
    fn flexible_equals_independent_original_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = RotationTable::new(8, DEFAULT_ROPE_BASE).unwrap();
        let layout = RegionLayout::uniform(3, 2, 3).unwrap();
        let x = Tensor::randn(&[18, 8], 1.0, &mut rng);
        let flex = apply_flexible_rope(&x, layout.regions(), &t).unwrap();
        let single = RegionLayout::uniform(1, 2, 3).unwrap();
        let parts: Vec<Tensor> = (0..3)
            .map(|n| apply_original_rope(&slice_rows(&x, 6 * n, 6).unwrap(), &single, &t).unwrap())
            .collect();
        let want = concat_rows(&parts.iter().collect::<Vec<_>>()).unwrap();
        assert!(flex.bit_eq(&want));
        // single region collapses the two schemes
        let x1 = slice_rows(&x, 0, 6).unwrap();
        assert!(apply_flexible_rope(&x1, single.regions(), &t)
            .unwrap()
            .bit_eq(&apply_original_rope(&x1, &single, &t).unwrap()));
    }

    #[test]
    fn same_local_cell_same_output() {
        let t = RotationTable::new(8, DEFAULT_ROPE_BASE).unwrap();
        let layout = RegionLayout::uniform(2, 2, 2).unwrap();
        let v: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let x = Tensor::from_rows(&vec![v; 8]).unwrap();
        let flex = apply_flexible_rope(&x, layout.regions(), &t).unwrap();
        for k in 0..4 {
            assert_eq!(flex.row(k), flex.row(k + 4));
        }
        let orig = apply_original_rope(&x, &layout, &t).unwrap();
        for k in 0..4 {
            assert_eq!(orig.row(k), flex.row(k));
            assert_ne!(orig.row(k + 4), flex.row(k + 4));
        }
    }

    #[test]
    fn flexible_rejects_unordered_regions() {
        let t = RotationTable::new(4, DEFAULT_ROPE_BASE).unwrap();
        let a = RegionCoordinates {
            region_index: 1,
            height: 1,
            width: 1,
        };
        let b = RegionCoordinates {
            region_index: 0,
            height: 1,
            width: 1,
        };
        let x = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            apply_flexible_rope(&x, &[a, b], &t),
            Err(Error::InvalidLayout(_))
        ));
        assert!(apply_flexible_rope(&x, &[b, b], &t).is_err());
        let layout = RegionLayout::uniform(2, 1, 1).unwrap();
        assert!(apply_original_rope(&Tensor::zeros(&[3, 4]), &layout, &t).is_err());
    }
}
