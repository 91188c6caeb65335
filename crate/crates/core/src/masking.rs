//! Patch grids and the uniform random patch mask.

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::augment::Image;
use crate::error::{PiciError, Result};
use crate::seed;

/// Row-major sequence of non-overlapping square patches.
///
/// Patch `k` covers grid cell `(k / cols, k % cols)` and is flattened in
/// `(row, col, channel)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub patches: Array2<f64>,
    pub patch_size: usize,
    pub channels: usize,
    pub grid: (usize, usize),
}

impl PatchSequence {
    pub fn n_patches(&self) -> usize {
        self.patches.nrows()
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
}

impl MaskPlan {
    /// Plan with nothing masked, used at inference.
    pub fn unmasked(n_patches: usize) -> Self {
        Self {
            visible_idx: (0..n_patches).collect(),
            masked_idx: Vec::new(),
        }
    }

    pub fn n_patches(&self) -> usize {
        self.visible_idx.len() + self.masked_idx.len()
    }

    /// Checks that visible and masked indices partition `0..n_patches`.
    pub fn check(&self, n_patches: usize) -> Result<()> {
        let mut seen = vec![false; n_patches];
        for &i in self.visible_idx.iter().chain(&self.masked_idx) {
            if i >= n_patches || seen[i] {
                return Err(PiciError::Config(format!(
                    "mask plan does not partition {n_patches} patches"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(PiciError::Config(format!(
                "mask plan does not cover {n_patches} patches"
            )));
        }
        Ok(())
    }
}

/// Half-up rounding of `ratio · n`.
pub fn masked_count(n_patches: usize, ratio: f64) -> usize {
    (ratio * n_patches as f64 + 0.5).floor() as usize
}

pub fn patchify(img: &Image, patch_size: usize) -> Result<PatchSequence> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(PiciError::PatchGrid(format!(
            "{h}x{w} image is not divisible into {patch_size}-pixel patches"
        )));
    }
    let (rows, cols) = (h / patch_size, w / patch_size);
    let dim = patch_size * patch_size * c;
    let mut patches = Array2::zeros((rows * cols, dim));
    let px = img.pixels();
    for gr in 0..rows {
        for gc in 0..cols {
            let mut row = patches.row_mut(gr * cols + gc);
            let mut k = 0;
            for py in 0..patch_size {
                let y = gr * patch_size + py;
                let start = (y * w + gc * patch_size) * c;
                for v in &px[start..start + patch_size * c] {
                    row[k] = *v;
                    k += 1;
                }
            }
        }
    }
    Ok(PatchSequence {
        patches,
        patch_size,
        channels: c,
        grid: (rows, cols),
    })
}

pub fn unpatchify(seq: &PatchSequence) -> Result<Image> {
    let (rows, cols) = seq.grid;
    let (p, c) = (seq.patch_size, seq.channels);
    if rows == 0 || cols == 0 || p == 0 || c == 0 {
        return Err(PiciError::PatchGrid("empty patch grid".into()));
    }
    if seq.n_patches() != rows * cols || seq.patch_dim() != p * p * c {
        return Err(PiciError::PatchGrid(format!(
            "{}x{} patch array inconsistent with {rows}x{cols} grid of {p}-pixel, {c}-channel patches",
            seq.n_patches(),
            seq.patch_dim()
        )));
    }
    let (h, w) = (rows * p, cols * p);
    let mut px = vec![0.0; h * w * c];
    for gr in 0..rows {
        for gc in 0..cols {
            let row = seq.patches.row(gr * cols + gc);
            for py in 0..p {
                let y = gr * p + py;
                let start = (y * w + gc * p) * c;
                for (k, dst) in px[start..start + p * c].iter_mut().enumerate() {
                    *dst = row[py * p * c + k];
                }
            }
        }
    }
    Image::new(h, w, c, px)
}

/// Uniform subset of `round(ratio · n)` patches to hide, via a seeded shuffle.
pub fn sample_mask(n_patches: usize, ratio: f64, rng_seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(PiciError::InvalidRatio(ratio));
    }
    if n_patches == 0 {
        return Err(PiciError::PatchGrid("mask over zero patches".into()));
    }
    let mut order: Vec<usize> = (0..n_patches).collect();
    order.shuffle(&mut seed::rng(rng_seed));
    let n_masked = masked_count(n_patches, ratio);
    let mut masked_idx = order[..n_masked].to_vec();
    let mut visible_idx = order[n_masked..].to_vec();
    masked_idx.sort_unstable();
    visible_idx.sort_unstable();
    Ok(MaskPlan {
        visible_idx,
        masked_idx,
    })
}
