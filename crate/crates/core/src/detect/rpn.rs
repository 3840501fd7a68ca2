//! Region proposal network: objectness and box deltas for every anchor,
//! plus proposal extraction.

use candle_core::{DType, Tensor};

use super::boxes::{BBox, BoxCoder};
use super::nms::nms_indices;
use crate::backbone::FeaturePyramid;
use crate::error::Result;
use crate::nn::Conv2d;
use crate::params::ParamBuilder;

#[derive(Debug, Clone)]
pub struct RpnHead {
    conv: Conv2d,
    objectness: Conv2d,
    deltas: Conv2d,
    anchors_per_location: usize,
}

/// Flattened per-anchor outputs in anchor order (level, row, column, ratio).
#[derive(Debug, Clone)]
pub struct RpnOutput {
    /// `(batch, anchors)` logits.
    pub objectness: Tensor,
    /// `(batch, anchors, 4)` normalized deltas.
    pub deltas: Tensor,
}

impl RpnHead {
    pub fn new(pb: &ParamBuilder, dim: usize, anchors_per_location: usize) -> Result<Self> {
        let a = anchors_per_location;
        Ok(Self {
            conv: Conv2d::new(&pb.pp("conv"), dim, dim, 3, 1, 1)?,
            objectness: Conv2d::with_std(&pb.pp("objectness"), dim, a, 1, 1, 0, 0.01)?,
            deltas: Conv2d::with_std(&pb.pp("deltas"), dim, 4 * a, 1, 1, 0, 0.01)?,
            anchors_per_location: a,
        })
    }

    pub fn forward(&self, fpn: &FeaturePyramid) -> Result<RpnOutput> {
        let a = self.anchors_per_location;
        let mut logits = Vec::with_capacity(fpn.maps.len());
        let mut deltas = Vec::with_capacity(fpn.maps.len());
        for m in &fpn.maps {
            let (b, _, h, w) = m.tensor.dims4()?;
            let t = self.conv.forward(&m.tensor)?.relu()?;
            logits.push(
                self.objectness
                    .forward(&t)?
                    .permute((0, 2, 3, 1))?
                    .contiguous()?
                    .reshape((b, h * w * a))?,
            );
            deltas.push(
                self.deltas
                    .forward(&t)?
                    .reshape((b, a, 4, h, w))?
                    .permute((0, 3, 4, 1, 2))?
                    .contiguous()?
                    .reshape((b, h * w * a, 4))?,
            );
        }
        Ok(RpnOutput {
            objectness: Tensor::cat(&logits, 1)?,
            deltas: Tensor::cat(&deltas, 1)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    pub pre_nms_top_n: usize,
    pub nms_iou: f64,
    pub post_nms_top_n: usize,
    pub min_size: f64,
}

/// Decodes one image's RPN outputs into scored, clipped, NMS-filtered boxes.
/// Works on detached values: proposals are constants for the second stage.
pub fn proposals_for_image(
    objectness: &[f64],
    deltas: &[[f64; 4]],
    anchors: &[BBox],
    coder: &BoxCoder,
    image_size: (f64, f64),
    cfg: &ProposalConfig,
) -> Vec<(BBox, f64)> {
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&i, &j| objectness[j].total_cmp(&objectness[i]).then(i.cmp(&j)));
    order.truncate(cfg.pre_nms_top_n);
    let mut boxes = Vec::with_capacity(order.len());
    let mut scores = Vec::with_capacity(order.len());
    for i in order {
        let b = coder.decode(&anchors[i], deltas[i]).clip(image_size.0, image_size.1);
        if b.width() >= cfg.min_size && b.height() >= cfg.min_size {
            boxes.push(b);
            scores.push(objectness[i]);
        }
    }
    let mut keep = nms_indices(&boxes, &scores, cfg.nms_iou);
    keep.truncate(cfg.post_nms_top_n);
    keep.into_iter().map(|i| (boxes[i], scores[i])).collect()
}

/// Detached copy of the RPN outputs for one batch item.
pub fn image_outputs(out: &RpnOutput, item: usize) -> Result<(Vec<f64>, Vec<[f64; 4]>)> {
    let obj: Vec<f64> = out.objectness.get(item)?.detach().to_dtype(DType::F64)?.to_vec1()?;
    let del: Vec<Vec<f64>> = out.deltas.get(item)?.detach().to_dtype(DType::F64)?.to_vec2()?;
    Ok((obj, del.into_iter().map(|d| [d[0], d[1], d[2], d[3]]).collect()))
}
