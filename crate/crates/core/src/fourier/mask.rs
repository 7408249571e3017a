use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{config, validation, Result};
use crate::rng::rng_for;

/// Parameters that regenerate a variable-density line mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub height: usize,
    pub width: usize,
    pub accel: f64,
    pub center_frac: f64,
    pub seed: u64,
}

/// Binary k-space sampling pattern. Phase-encode lines run along the column
/// index: keeping line `c` keeps every row at column `c`. Frequencies are in
/// unshifted DFT order, so the DC line is column 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    height: usize,
    width: usize,
    keep: Vec<bool>,
    spec: Option<MaskSpec>,
}

impl SamplingMask {
    /// Arbitrary pattern. At least one entry must be kept.
    pub fn from_keep(height: usize, width: usize, keep: Vec<bool>) -> Result<Self> {
        if height < 2 || width < 2 || !height.is_multiple_of(2) || !width.is_multiple_of(2) {
            return Err(validation(format!("bad mask shape {height}x{width}")));
        }
        if keep.len() != height * width {
            return Err(validation("mask plane length mismatch"));
        }
        if !keep.iter().any(|k| *k) {
            return Err(validation("mask keeps no samples"));
        }
        Ok(Self {
            height,
            width,
            keep,
            spec: None,
        })
    }

    pub fn from_lines(height: usize, width: usize, lines: &[bool]) -> Result<Self> {
        if lines.len() != width {
            return Err(validation("line vector length must equal width"));
        }
        let keep = (0..height).flat_map(|_| lines.iter().copied()).collect();
        Self::from_keep(height, width, keep)
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::from_keep(height, width, vec![true; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn spec(&self) -> Option<&MaskSpec> {
        self.spec.as_ref()
    }

    pub fn is_kept(&self, row: usize, col: usize) -> bool {
        self.keep[row * self.width + col]
    }

    pub fn sampled_count(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    /// Columns that are kept in every row.
    pub fn kept_lines(&self) -> Vec<usize> {
        (0..self.width)
            .filter(|&c| (0..self.height).all(|r| self.is_kept(r, c)))
            .collect()
    }

    pub fn is_full(&self) -> bool {
        self.keep.iter().all(|k| *k)
    }

    /// Zeroes unsampled entries of stacked `[re, im]` planes in place.
    pub fn apply_in_place(&self, planes: &mut [f64]) {
        let n = self.keep.len();
        debug_assert_eq!(planes.len(), 2 * n);
        for (k, keep) in self.keep.iter().enumerate() {
            if !keep {
                planes[k] = 0.0;
                planes[n + k] = 0.0;
            }
        }
    }
}

/// Column indices of the `n_center` lines closest to DC.
fn central_lines(width: usize, n_center: usize) -> Vec<usize> {
    let start = width / 2 - n_center / 2;
    (start..start + n_center).map(|pos| (pos + width / 2) % width).collect()
}

/// Variable-density Cartesian mask: a fully kept central band plus lines drawn
/// uniformly without replacement from the rest, for `round(width / accel)`
/// lines in total.
pub fn make_vd_mask(height: usize, width: usize, accel: f64, center_frac: f64, seed: u64) -> Result<SamplingMask> {
    if !(accel >= 1.0) || !accel.is_finite() {
        return Err(config(format!("acceleration must be >= 1, got {accel}")));
    }
    if !(center_frac > 0.0 && center_frac < 1.0) {
        return Err(config(format!("center_frac must lie in (0, 1), got {center_frac}")));
    }
    if height < 2 || width < 2 || !height.is_multiple_of(2) || !width.is_multiple_of(2) {
        return Err(validation(format!("bad mask shape {height}x{width}")));
    }
    let total = ((width as f64 / accel).round() as usize).clamp(1, width);
    let n_center = ((center_frac * width as f64).round() as usize).max(1);
    if n_center > total {
        return Err(config(format!(
            "central band of {n_center} lines exceeds the {total}-line budget at {accel}x"
        )));
    }
    let mut lines = vec![false; width];
    for c in central_lines(width, n_center) {
        lines[c] = true;
    }
    let outside: Vec<usize> = (0..width).filter(|c| !lines[*c]).collect();
    let mut rng = rng_for(seed, &[0x4d41_534b]);
    for i in sample(&mut rng, outside.len(), total - n_center) {
        lines[outside[i]] = true;
    }
    let mut mask = SamplingMask::from_lines(height, width, &lines)?;
    mask.spec = Some(MaskSpec {
        height,
        width,
        accel,
        center_frac,
        seed,
    });
    Ok(mask)
}

impl MaskSpec {
    pub fn build(&self) -> Result<SamplingMask> {
        make_vd_mask(self.height, self.width, self.accel, self.center_frac, self.seed)
    }
}
