//! RoI feature extraction (bilinear RoI-align over FPN levels) and the
//! box classification / regression head.

use candle_core::Tensor;

use super::boxes::BBox;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamBuilder;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiAlignConfig {
    /// Output is `bins × bins` per proposal.
    pub bins: usize,
    /// Sampling points per bin along each axis.
    pub sampling: usize,
    /// Box side that maps to `canonical_level` in the level formula.
    pub canonical_size: f64,
    pub canonical_level: i32,
    /// Level number of the first feature map passed to [`roi_align`].
    pub first_level: i32,
}

impl Default for RoiAlignConfig {
    fn default() -> Self {
        Self {
            bins: 3,
            sampling: 2,
            canonical_size: 224.0,
            canonical_level: 4,
            first_level: 2,
        }
    }
}

/// Index into the given maps for a box: `⌊k0 + log2(√area / s0)⌋`, clamped.
pub fn assign_level(b: &BBox, cfg: &RoiAlignConfig, num_levels: usize) -> usize {
    let side = b.area().sqrt().max(1e-6);
    let k = (cfg.canonical_level as f64 + (side / cfg.canonical_size).log2()).floor() as i32;
    (k - cfg.first_level).clamp(0, num_levels as i32 - 1) as usize
}

/// Bilinear taps `(row, col, weight)` at continuous position `(y, x)` on an
/// `h × w` grid whose cell centres sit at integer coordinates. Positions
/// more than one cell outside the grid contribute nothing.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> Vec<(usize, usize, f64)> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return Vec::new();
    }
    let axis = |v: f64, n: usize| -> (usize, usize, f64) {
        let v = v.max(0.0);
        let lo = v.floor() as usize;
        if lo >= n - 1 {
            (n - 1, n - 1, 0.0)
        } else {
            (lo, lo + 1, v - lo as f64)
        }
    };
    let (y0, y1, ly) = axis(y, h);
    let (x0, x1, lx) = axis(x, w);
    vec![
        (y0, x0, (1.0 - ly) * (1.0 - lx)),
        (y0, x1, (1.0 - ly) * lx),
        (y1, x0, ly * (1.0 - lx)),
        (y1, x1, ly * lx),
    ]
}

/// Pools each box into `(bins, bins, C)` features.
///
/// `maps` are one image's `(C, h, w)` feature maps with their strides. Every
/// output bin averages `sampling²` bilinear samples, each a 4-tap weighted
/// gather from the flattened features, so gradients reach the maps through a
/// gather plus a weighted sum.
pub fn roi_align(maps: &[(Tensor, usize)], boxes: &[BBox], cfg: &RoiAlignConfig) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::config("roi_align needs at least one feature map"))?;
    let c = first.0.dim(0)?;
    let (bins, s) = (cfg.bins, cfg.sampling);
    let dtype = first.0.dtype();
    let device = first.0.device().clone();
    if boxes.is_empty() {
        return Ok(Tensor::zeros((0, bins, bins, c), dtype, &device)?);
    }
    let mut offsets = Vec::with_capacity(maps.len());
    let mut flat = Vec::with_capacity(maps.len());
    let mut total = 0;
    for (t, _) in maps {
        let (ch, h, w) = t.dims3()?;
        if ch != c {
            return Err(Error::config("roi_align maps must share a channel count"));
        }
        offsets.push(total);
        total += h * w;
        flat.push(t.permute((1, 2, 0))?.contiguous()?.reshape((h * w, c))?);
    }
    let features = Tensor::cat(&flat, 0)?;

    // fixed tap count per bin; unused taps point at row 0 with weight 0
    let taps_per_bin = 4 * s * s;
    let rows = boxes.len() * bins * bins;
    let mut index = vec![0u32; rows * taps_per_bin];
    let mut weight = vec![0.0f64; rows * taps_per_bin];
    let per_sample = 1.0 / (s * s) as f64;
    for (r, b) in boxes.iter().enumerate() {
        let lvl = assign_level(b, cfg, maps.len());
        let (t, stride) = &maps[lvl];
        let (_, h, w) = t.dims3()?;
        let scale = 1.0 / *stride as f64;
        let (x1, y1) = (b.x_min * scale - 0.5, b.y_min * scale - 0.5);
        let (x2, y2) = (b.x_max * scale - 0.5, b.y_max * scale - 0.5);
        let (bw, bh) = ((x2 - x1) / bins as f64, (y2 - y1) / bins as f64);
        for by in 0..bins {
            for bx in 0..bins {
                let row = (r * bins + by) * bins + bx;
                let mut k = row * taps_per_bin;
                for iy in 0..s {
                    let y = y1 + (by as f64 + (iy as f64 + 0.5) / s as f64) * bh;
                    for ix in 0..s {
                        let x = x1 + (bx as f64 + (ix as f64 + 0.5) / s as f64) * bw;
                        for (yy, xx, wt) in bilinear_taps(y, x, h, w) {
                            index[k] = (offsets[lvl] + yy * w + xx) as u32;
                            weight[k] = wt * per_sample;
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    let n = rows * taps_per_bin;
    let index = Tensor::from_vec(index, n, &device)?;
    let weight = Tensor::from_vec(weight, (n, 1), &device)?.to_dtype(dtype)?;
    let gathered = features.index_select(&index, 0)?.broadcast_mul(&weight)?;
    Ok(gathered
        .reshape((rows, taps_per_bin, c))?
        .sum(1)?
        .reshape((boxes.len(), bins, bins, c))?)
}

/// Two hidden layers, then `C+1`-way classification and class-specific
/// box deltas.
#[derive(Debug, Clone)]
pub struct RoiHead {
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    bbox: Linear,
    num_classes: usize,
}

impl RoiHead {
    pub fn new(pb: &ParamBuilder, in_dim: usize, hidden: usize, num_classes: usize) -> Result<Self> {
        let fan = |n: usize| (n as f64).sqrt().recip();
        Ok(Self {
            fc1: Linear::with_std(&pb.pp("fc1"), in_dim, hidden, true, fan(in_dim))?,
            fc2: Linear::with_std(&pb.pp("fc2"), hidden, hidden, true, fan(hidden))?,
            cls: Linear::with_std(&pb.pp("cls"), hidden, num_classes + 1, true, 0.01)?,
            bbox: Linear::with_std(&pb.pp("bbox"), hidden, 4 * num_classes, true, 0.001)?,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(R, bins, bins, C)` pooled features → `(R, C+1)` logits and
    /// `(R, 4·num_classes)` deltas.
    pub fn forward(&self, pooled: &Tensor) -> Result<(Tensor, Tensor)> {
        let r = pooled.dim(0)?;
        let x = pooled.reshape((r, pooled.elem_count() / r.max(1)))?;
        let x = self.fc1.forward(&x)?.relu()?;
        let x = self.fc2.forward(&x)?.relu()?;
        Ok((self.cls.forward(&x)?, self.bbox.forward(&x)?))
    }
}
