//! Block-wise masking of generated perturbations during training.
//!
//! The spatial plane is cut into an `N×N` grid of random-sized blocks and two
//! distinct blocks are zeroed across all channels. Cut points are drawn
//! uniformly without replacement from the interior pixel boundaries, so every
//! block is at least one pixel on each side and all blocks have the same
//! expected area.

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Perturbation;
use crate::nn::keyed_rng;

/// An `N×N` partition of an `H×W` plane and the two blocks to zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub grid_n: usize,
    /// `N + 1` strictly increasing row cut positions from `0` to `H`.
    pub row_bounds: Vec<usize>,
    /// `N + 1` strictly increasing column cut positions from `0` to `W`.
    pub col_bounds: Vec<usize>,
    /// Two distinct `(row_block, col_block)` indices.
    pub masked_blocks: [(usize, usize); 2],
}

fn sorted_cuts(rng: &mut impl Rng, len: usize, n: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = sample(rng, len - 1, n - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut bounds = Vec::with_capacity(n + 1);
    bounds.push(0);
    bounds.extend(cuts);
    bounds.push(len);
    bounds
}

/// Samples a partition and the two masked blocks; deterministic in `rng_seed`.
pub fn sample_partition(n: usize, h: usize, w: usize, rng_seed: u64) -> Result<MaskSpec> {
    let mut rng = keyed_rng("mask-partition", &[rng_seed]);
    sample_partition_with(n, h, w, &mut rng)
}

/// As [`sample_partition`], drawing from a caller-supplied RNG.
pub fn sample_partition_with(n: usize, h: usize, w: usize, rng: &mut impl Rng) -> Result<MaskSpec> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("grid size must be at least 2, got {n}")));
    }
    if h < n || w < n {
        return Err(Error::InvalidArgument(format!(
            "a {h}×{w} plane cannot hold {n}×{n} non-empty blocks"
        )));
    }
    let row_bounds = sorted_cuts(rng, h, n);
    let col_bounds = sorted_cuts(rng, w, n);
    let picked = sample(rng, n * n, 2).into_vec();
    let masked_blocks = [
        (picked[0] / n, picked[0] % n),
        (picked[1] / n, picked[1] % n),
    ];
    Ok(MaskSpec {
        grid_n: n,
        row_bounds,
        col_bounds,
        masked_blocks,
    })
}

impl MaskSpec {
    pub fn height(&self) -> usize {
        *self.row_bounds.last().unwrap_or(&0)
    }

    pub fn width(&self) -> usize {
        *self.col_bounds.last().unwrap_or(&0)
    }

    /// Half-open `(rows, cols)` extent of block `(i, j)`.
    pub fn block(&self, i: usize, j: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        (
            self.row_bounds[i]..self.row_bounds[i + 1],
            self.col_bounds[j]..self.col_bounds[j + 1],
        )
    }

    pub fn block_area(&self, i: usize, j: usize) -> usize {
        let (r, c) = self.block(i, j);
        r.len() * c.len()
    }

    pub fn masked_area(&self) -> usize {
        self.masked_blocks
            .iter()
            .map(|&(i, j)| self.block_area(i, j))
            .sum()
    }

    /// Checks the tiling invariants against an `h×w` plane.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let n = self.grid_n;
        let check = |b: &[usize], len: usize, axis: &str| -> Result<()> {
            if b.len() != n + 1 || b[0] != 0 || b[n] != len || b.windows(2).any(|p| p[0] >= p[1]) {
                return Err(Error::InvalidArgument(format!(
                    "{axis} bounds {b:?} do not tile length {len} in {n} blocks"
                )));
            }
            Ok(())
        };
        check(&self.row_bounds, h, "row")?;
        check(&self.col_bounds, w, "column")?;
        let [a, b] = self.masked_blocks;
        if a == b || a.0 >= n || a.1 >= n || b.0 >= n || b.1 >= n {
            return Err(Error::InvalidArgument(format!(
                "masked blocks {:?} are not two distinct blocks of a {n}×{n} grid",
                self.masked_blocks
            )));
        }
        Ok(())
    }

    /// Row-major `H×W` plane, `true` where the perturbation is kept.
    pub fn keep_plane(&self) -> Vec<bool> {
        let (h, w) = (self.height(), self.width());
        let mut keep = vec![true; h * w];
        for &(i, j) in &self.masked_blocks {
            let (rows, cols) = self.block(i, j);
            for y in rows {
                for x in cols.clone() {
                    keep[y * w + x] = false;
                }
            }
        }
        keep
    }
}

/// With probability `prob`, zeroes the two masked blocks of `delta` in every
/// channel; otherwise returns `delta` unchanged.
pub fn apply_mask(delta: &Perturbation, spec: &MaskSpec, prob: f64, rng_seed: u64) -> Result<Perturbation> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::InvalidArgument(format!(
            "mask probability must lie in [0, 1], got {prob}"
        )));
    }
    let (c, h, w) = delta.shape();
    if (spec.height(), spec.width()) != (h, w) {
        return Err(Error::shape(
            "mask spec",
            (h, w),
            (spec.height(), spec.width()),
        ));
    }
    spec.validate(h, w)?;
    let mut rng = keyed_rng("mask-apply", &[rng_seed]);
    if !mask_fires(&mut rng, prob) {
        return Ok(delta.clone());
    }
    let keep = spec.keep_plane();
    let mut data = delta.data().to_vec();
    for ch in 0..c {
        for (k, keep) in keep.iter().enumerate() {
            if !keep {
                data[ch * h * w + k] = 0.0;
            }
        }
    }
    Perturbation::new(c, h, w, data, delta.budget())
}

/// Bernoulli draw used for the masking probability.
pub fn mask_fires(rng: &mut impl Rng, prob: f64) -> bool {
    rng.random::<f64>() < prob
}

/// `(B, 1, H, W)` keep-mask (`1` keeps, `0` zeroes); `None` entries keep everything.
pub fn keep_mask_tensor(specs: &[Option<MaskSpec>], h: usize, w: usize, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(specs.len() * h * w);
    for spec in specs {
        match spec {
            Some(s) => {
                if (s.height(), s.width()) != (h, w) {
                    return Err(Error::shape("mask spec", (h, w), (s.height(), s.width())));
                }
                data.extend(s.keep_plane().into_iter().map(u8::from));
            }
            None => data.extend(std::iter::repeat_n(1u8, h * w)),
        }
    }
    Ok(Tensor::from_vec(data, (specs.len(), 1, h, w), device)?)
}

/// Zeroes `delta` (B, C, H, W) where `keep` (B, 1, H, W) is zero.
pub fn apply_keep_mask(delta: &Tensor, keep: &Tensor) -> Result<Tensor> {
    let keep = keep.broadcast_as(delta.shape())?.contiguous()?;
    let zeros = delta.zeros_like()?;
    Ok(keep.where_cond(delta, &zeros)?)
}

pub fn keep_mask_dtype() -> DType {
    DType::U8
}
