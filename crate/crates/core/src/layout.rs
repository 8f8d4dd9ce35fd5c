//! Vertical stacking of per-step patch grids into one latent sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One region's patch grid. Local coordinates always start at `(0, 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCoordinates {
    pub region_index: usize,
    pub height: usize,
    pub width: usize,
}

impl RegionCoordinates {
    pub fn token_count(&self) -> usize {
        self.height * self.width
    }

    /// Local `(row, col)` of the `t`-th token (row-major).
    pub fn local(&self, t: usize) -> (usize, usize) {
        (t / self.width, t % self.width)
    }
}

/// N regions stacked top to bottom; tokens are ordered region by region,
/// row-major inside each region, which coincides with row-major order on
/// the global grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionLayout {
    regions: Vec<RegionCoordinates>,
}

impl RegionLayout {
    pub fn new(regions: Vec<RegionCoordinates>) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::InvalidLayout("layout needs at least one region".into()));
        }
        for (n, r) in regions.iter().enumerate() {
            if r.region_index != n {
                return Err(Error::InvalidLayout(format!(
                    "region at position {n} has index {}",
                    r.region_index
                )));
            }
            if r.token_count() == 0 {
                return Err(Error::InvalidLayout(format!("region {n} is empty")));
            }
        }
        Ok(Self { regions })
    }

    /// `count` identical `height × width` grids.
    pub fn uniform(count: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(
            (0..count)
                .map(|region_index| RegionCoordinates {
                    region_index,
                    height,
                    width,
                })
                .collect(),
        )
    }

    pub fn regions(&self) -> &[RegionCoordinates] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn token_counts(&self) -> Vec<usize> {
        self.regions.iter().map(RegionCoordinates::token_count).collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.regions.iter().map(RegionCoordinates::token_count).sum()
    }

    /// First token index of region `n` in the stacked sequence.
    pub fn token_offset(&self, n: usize) -> usize {
        self.regions[..n].iter().map(RegionCoordinates::token_count).sum()
    }

    /// Global row of region `n`'s first row.
    pub fn row_offset(&self, n: usize) -> usize {
        self.regions[..n].iter().map(|r| r.height).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_accumulate() {
        let layout = RegionLayout::new(vec![
            RegionCoordinates {
                region_index: 0,
                height: 2,
                width: 3,
            },
            RegionCoordinates {
                region_index: 1,
                height: 1,
                width: 3,
            },
            RegionCoordinates {
                region_index: 2,
                height: 4,
                width: 3,
            },
        ])
        .unwrap();
        assert_eq!(layout.token_counts(), vec![6, 3, 12]);
        assert_eq!(layout.total_tokens(), 21);
        assert_eq!(layout.token_offset(2), 9);
        assert_eq!(layout.row_offset(2), 3);
        assert_eq!(layout.regions()[2].local(7), (2, 1));
    }

    #[test]
    fn malformed_layouts_are_rejected() {
        assert!(RegionLayout::uniform(0, 2, 2).is_err());
        assert!(RegionLayout::uniform(2, 0, 2).is_err());
        let swapped = vec![
            RegionCoordinates {
                region_index: 1,
                height: 1,
                width: 1,
            },
            RegionCoordinates {
                region_index: 0,
                height: 1,
                width: 1,
            },
        ];
        assert!(matches!(RegionLayout::new(swapped), Err(Error::InvalidLayout(_))));
    }
}
