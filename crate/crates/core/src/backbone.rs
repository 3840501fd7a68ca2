//! Hierarchical windowed-attention image encoder.
//!
//! Patch embedding, stages of (shifted) window attention blocks separated by
//! 2×2 patch merging, and a layer norm on each of the four stage outputs.
//! Map `i` has `C·2^i` channels at stride `4·2^i`.

use candle_core::{DType, Device, IndexOp, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, LayerNorm, Linear, Mlp};
use crate::params::{Init, ParamBuilder};

pub const NUM_STAGES: usize = 4;

/// Additive logit for attention pairs that must not interact.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub base_channels: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            patch_size: 4,
            base_channels: 32,
            depths: vec![1, 1, 2, 1],
            heads: vec![1, 2, 4, 8],
            window_size: 4,
            mlp_ratio: 4,
        }
    }

    /// Swin-T sized encoder (C = 96, window 7).
    pub fn tiny() -> Self {
        Self {
            patch_size: 4,
            base_channels: 96,
            depths: vec![2, 2, 6, 2],
            heads: vec![3, 6, 12, 24],
            window_size: 7,
            mlp_ratio: 4,
        }
    }

    /// Smallest configuration used for finite-difference gradient checks.
    pub fn micro() -> Self {
        Self {
            patch_size: 4,
            base_channels: 8,
            depths: vec![1, 1, 1, 1],
            heads: vec![1, 1, 2, 2],
            window_size: 4,
            mlp_ratio: 2,
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn stage_stride(&self, stage: usize) -> usize {
        self.patch_size << stage
    }

    /// Channel count of the last map, which the caption decoder consumes.
    pub fn out_channels(&self) -> usize {
        self.stage_channels(NUM_STAGES - 1)
    }

    /// `(channels, height, width, stride)` of each output map.
    pub fn pyramid_shapes(&self, height: usize, width: usize) -> Vec<(usize, usize, usize, usize)> {
        (0..NUM_STAGES)
            .map(|i| {
                let s = self.stage_stride(i);
                (self.stage_channels(i), height / s, width / s, s)
            })
            .collect()
    }

    /// Window used at a stage: the configured size, shrunk to the grid when
    /// the grid is smaller.
    pub fn effective_window(&self, grid: usize) -> usize {
        self.window_size.min(grid)
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.depths.len() != NUM_STAGES || self.heads.len() != NUM_STAGES {
            return Err(Error::config(format!(
                "depths and heads need {NUM_STAGES} entries, got {} and {}",
                self.depths.len(),
                self.heads.len()
            )));
        }
        if self.patch_size == 0 || self.window_size == 0 || self.base_channels == 0 {
            return Err(Error::config("patch size, window size and channels must be positive"));
        }
        let total_stride = self.stage_stride(NUM_STAGES - 1);
        if !height.is_multiple_of(total_stride) || !width.is_multiple_of(total_stride) {
            return Err(Error::config(format!(
                "image {height}x{width} must be divisible by {total_stride} (patch size {} times 8)",
                self.patch_size
            )));
        }
        for stage in 0..NUM_STAGES {
            let ch = self.stage_channels(stage);
            if self.heads[stage] == 0 || !ch.is_multiple_of(self.heads[stage]) {
                return Err(Error::config(format!(
                    "stage {stage}: {ch} channels not divisible by {} heads",
                    self.heads[stage]
                )));
            }
            let (gh, gw) = (height / self.stage_stride(stage), width / self.stage_stride(stage));
            for g in [gh, gw] {
                let w = self.effective_window(g);
                if g % w != 0 {
                    return Err(Error::config(format!(
                        "stage {stage}: grid {gh}x{gw} not divisible by window {w}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shift {
    None,
    HalfWindow,
}

/// Feature map in `(batch, channels, height, width)` layout.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.tensor.dims();
        (d[2], d[3])
    }
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub maps: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn last(&self) -> &FeatureMap {
        self.maps.last().expect("pyramid is never empty")
    }
}

/// `(B, H, W, C)` → `(B·nW, ws·ws, C)`.
fn window_partition(x: &Tensor, ws: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h / ws, ws, w / ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (h / ws) * (w / ws), ws * ws, c))?)
}

fn window_reverse(windows: &Tensor, ws: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = windows.dim(2)?;
    Ok(windows
        .reshape((b, h / ws, w / ws, ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h, w, c))?)
}

/// Region label of every grid cell after a cyclic shift by `shift`: cells
/// that wrapped around get a different label from their new neighbours.
fn shifted_region_labels(h: usize, w: usize, ws: usize, shift: usize) -> Vec<usize> {
    let band = |i: usize, n: usize| -> usize {
        if i < n - ws {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            labels.push(band(y, h) * 3 + band(x, w));
        }
    }
    labels
}

fn shift_mask(h: usize, w: usize, ws: usize, shift: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let labels = shifted_region_labels(h, w, ws, shift);
    let n = ws * ws;
    let (nwh, nww) = (h / ws, w / ws);
    let mut mask = Vec::with_capacity(nwh * nww * n * n);
    for wy in 0..nwh {
        for wx in 0..nww {
            let cell = |i: usize| labels[(wy * ws + i / ws) * w + wx * ws + i % ws];
            for i in 0..n {
                for j in 0..n {
                    mask.push(if cell(i) == cell(j) { 0.0 } else { MASKED });
                }
            }
        }
    }
    Ok(Tensor::from_vec(mask, (nwh * nww, n, n), device)?.to_dtype(dtype)?)
}

fn relative_position_index(ws: usize) -> Vec<u32> {
    let n = ws * ws;
    let span = 2 * ws - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dy = (i / ws) as isize - (j / ws) as isize + ws as isize - 1;
            let dx = (i % ws) as isize - (j % ws) as isize + ws as isize - 1;
            idx.push((dy as usize * span + dx as usize) as u32);
        }
    }
    idx
}

/// Multi-head self-attention inside non-overlapping windows, with a learned
/// relative position bias and optional half-window cyclic shift.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    rel_table: Tensor,
    rel_index: Tensor,
    heads: usize,
    dim: usize,
    window: usize,
    grid: (usize, usize),
    mask: Option<Tensor>,
}

impl WindowAttention {
    pub fn new(
        pb: &ParamBuilder,
        dim: usize,
        heads: usize,
        window: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("dim {dim} not divisible by {heads} heads")));
        }
        if !grid.0.is_multiple_of(window) || !grid.1.is_multiple_of(window) {
            return Err(Error::config(format!(
                "grid {}x{} not divisible by window {window}",
                grid.0, grid.1
            )));
        }
        let span = 2 * window - 1;
        let device = pb.device();
        let shift = window / 2;
        let mask = if shift > 0 && grid.0 > window && grid.1 > window {
            Some(shift_mask(grid.0, grid.1, window, shift, pb.dtype(), &device)?)
        } else {
            None
        };
        Ok(Self {
            qkv: Linear::new(&pb.pp("qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(&pb.pp("proj"), dim, dim, true)?,
            rel_table: pb.get("rel_bias", &[span * span, heads], Init::Normal(0.02))?,
            rel_index: Tensor::from_vec(relative_position_index(window), window.pow(4), &device)?,
            heads,
            dim,
            window,
            grid,
            mask,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Shift actually applied: none when the grid fits in one window.
    fn shift_amount(&self, shift: Shift) -> usize {
        match shift {
            Shift::HalfWindow if self.mask.is_some() => self.window / 2,
            _ => 0,
        }
    }

    /// Attention over a `(B, H, W, C)` token grid; shape-preserving.
    pub fn forward_grid(&self, x: &Tensor, shift: Shift) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if (h, w) != self.grid || c != self.dim {
            return Err(Error::config(format!(
                "window attention built for {}x{}x{}, got {h}x{w}x{c}",
                self.grid.0, self.grid.1, self.dim
            )));
        }
        let s = self.shift_amount(shift);
        let x = if s > 0 {
            x.roll(-(s as i32), 1)?.roll(-(s as i32), 2)?
        } else {
            x.clone()
        };
        let ws = self.window;
        let n = ws * ws;
        let windows = window_partition(&x, ws)?;
        let bw = windows.dim(0)?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(&windows)?
            .reshape((bw, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?;
        let (q, k, v) = (qkv.i(0)?, qkv.i(1)?, qkv.i(2)?);

        let rel = self
            .rel_table
            .index_select(&self.rel_index, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .contiguous()?;
        let bias = match (&self.mask, s > 0) {
            (Some(mask), true) => {
                let nw = mask.dim(0)?;
                let full = rel
                    .unsqueeze(0)?
                    .broadcast_add(&mask.unsqueeze(1)?)?
                    .unsqueeze(0)?
                    .broadcast_as((b, nw, self.heads, n, n))?;
                full.reshape((b * nw, self.heads, n, n))?
            }
            _ => rel.unsqueeze(0)?,
        };
        let out = nn::attention(&q, &k, &v, Some(&bias))?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((bw, n, c))?;
        let out = self.proj.forward(&out)?;
        let out = window_reverse(&out, ws, b, h, w)?;
        if s > 0 {
            Ok(out.roll(s as i32, 1)?.roll(s as i32, 2)?)
        } else {
            Ok(out)
        }
    }
}

#[derive(Debug, Clone)]
struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    shift: Shift,
}

impl SwinBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward_grid(&self.norm1.forward(x)?, self.shift)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

/// Concatenates each 2×2 neighbourhood and projects `4c → 2c`.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    norm: LayerNorm,
    reduction: Linear,
}

impl PatchMerge {
    pub fn new(pb: &ParamBuilder, in_dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&pb.pp("norm"), 4 * in_dim)?,
            reduction: Linear::new(&pb.pp("reduction"), 4 * in_dim, 2 * in_dim, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!("patch merge needs even grid, got {h}x{w}")));
        }
        // (b, h/2, 2, w/2, 2, c) → (b, h/2, w/2, [col parity, row parity], c)
        let merged = x
            .reshape((b, h / 2, 2, w / 2, 2, c))?
            .permute((0, 1, 3, 4, 2, 5))?
            .contiguous()?
            .reshape((b, h / 2, w / 2, 4 * c))?;
        self.reduction.forward(&self.norm.forward(&merged)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    merge: Option<PatchMerge>,
    blocks: Vec<SwinBlock>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    height: usize,
    width: usize,
    patch_proj: Linear,
    patch_norm: LayerNorm,
    stages: Vec<Stage>,
    out_norms: Vec<LayerNorm>,
}

impl Backbone {
    pub fn new(pb: &ParamBuilder, cfg: &BackboneConfig, height: usize, width: usize) -> Result<Self> {
        cfg.validate(height, width)?;
        let p = cfg.patch_size;
        let pe = pb.pp("patch_embed");
        let patch_proj = Linear::new(&pe.pp("proj"), 3 * p * p, cfg.base_channels, true)?;
        let patch_norm = LayerNorm::new(&pe.pp("norm"), cfg.base_channels)?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut out_norms = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let sp = pb.pp(format!("stages.{i}"));
            let dim = cfg.stage_channels(i);
            let merge = if i > 0 {
                Some(PatchMerge::new(&sp.pp("merge"), cfg.stage_channels(i - 1))?)
            } else {
                None
            };
            let grid = (height / cfg.stage_stride(i), width / cfg.stage_stride(i));
            let window = cfg.effective_window(grid.0.min(grid.1));
            let mut blocks = Vec::with_capacity(cfg.depths[i]);
            for j in 0..cfg.depths[i] {
                let bp = sp.pp(format!("blocks.{j}"));
                blocks.push(SwinBlock {
                    norm1: LayerNorm::new(&bp.pp("norm1"), dim)?,
                    attn: WindowAttention::new(&bp.pp("attn"), dim, cfg.heads[i], window, grid)?,
                    norm2: LayerNorm::new(&bp.pp("norm2"), dim)?,
                    mlp: Mlp::new(&bp.pp("mlp"), dim, dim * cfg.mlp_ratio)?,
                    shift: if j % 2 == 1 { Shift::HalfWindow } else { Shift::None },
                });
            }
            stages.push(Stage { merge, blocks });
            out_norms.push(LayerNorm::new(&pb.pp(format!("out_norms.{i}")), dim)?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            height,
            width,
            patch_proj,
            patch_norm,
            stages,
            out_norms,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// `(B, H, W, 3)` images → `(B, H/p, W/p, C)` normalized patch tokens.
    pub fn embed_patches(&self, images: &Tensor) -> Result<Tensor> {
        let (b, h, w, ch) = images.dims4()?;
        let p = self.cfg.patch_size;
        if h % p != 0 || w % p != 0 || ch != 3 {
            return Err(Error::config(format!(
                "image {h}x{w}x{ch} incompatible with patch size {p}"
            )));
        }
        let patches = images
            .reshape((b, h / p, p, w / p, p, 3))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, h / p, w / p, 3 * p * p))?;
        self.patch_norm.forward(&self.patch_proj.forward(&patches)?)
    }

    pub fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (_, h, w, _) = images.dims4()?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::config(format!(
                "backbone built for {}x{} images, got {h}x{w}",
                self.height, self.width
            )));
        }
        let mut x = self.embed_patches(images)?;
        let mut maps = Vec::with_capacity(NUM_STAGES);
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(m) = &stage.merge {
                x = m.forward(&x)?;
            }
            for blk in &stage.blocks {
                x = blk.forward(&x)?;
            }
            let out = self.out_norms[i].forward(&x)?.permute((0, 3, 1, 2))?.contiguous()?;
            maps.push(FeatureMap {
                tensor: out,
                stride: self.cfg.stage_stride(i),
            });
        }
        Ok(FeaturePyramid { maps })
    }
}
