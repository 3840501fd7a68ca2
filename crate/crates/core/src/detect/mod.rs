//! Two-stage detection branch on top of the shared backbone.
//!
//! The flow per training step is: FPN → RPN outputs → detached target
//! construction ([`DetectionHead::build_targets`]: anchor matching, sampling,
//! proposal extraction, RoI matching) → differentiable loss terms
//! ([`DetectionHead::loss`]). Splitting targets from the loss keeps the loss a
//! smooth function of the parameters for a fixed set of targets.

pub mod anchors;
pub mod boxes;
pub mod fpn;
pub mod loss;
pub mod nms;
pub mod roi;
pub mod rpn;

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FeaturePyramid, NUM_STAGES};
use crate::error::Result;
use crate::nn::softmax_last;
use crate::params::ParamBuilder;
use anchors::{match_anchors, sample_balanced, AnchorConfig, AnchorLabel, AnchorSet};
use boxes::{iou, BBox, BoxCoder};
use fpn::Fpn;
use loss::{roi_loss, rpn_loss, scalar, RoiTargets, RpnTargets};
use roi::{roi_align, RoiAlignConfig, RoiHead};
use rpn::{image_outputs, proposals_for_image, ProposalConfig, RpnHead, RpnOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub fpn_dim: usize,
    pub anchors: AnchorConfig,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub pre_nms_top_n: usize,
    pub proposal_nms_iou: f64,
    pub post_nms_top_n: usize,
    pub roi_fg_iou: f64,
    pub roi_batch: usize,
    pub roi_fg_fraction: f64,
    pub roi_bins: usize,
    pub roi_sampling: usize,
    pub roi_hidden: usize,
    pub score_thr: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
    pub smooth_l1_beta: f64,
    pub delta_std: [f64; 4],
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            fpn_dim: 64,
            anchors: AnchorConfig::default(),
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 64,
            rpn_pos_fraction: 0.5,
            pre_nms_top_n: 256,
            proposal_nms_iou: 0.7,
            post_nms_top_n: 64,
            roi_fg_iou: 0.5,
            roi_batch: 32,
            roi_fg_fraction: 0.25,
            roi_bins: 3,
            roi_sampling: 2,
            roi_hidden: 256,
            score_thr: 0.05,
            nms_iou: 0.5,
            max_dets: 100,
            smooth_l1_beta: 1.0,
            delta_std: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

/// One predicted object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
}

/// Ground-truth objects of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

/// Scalar values of the four detection terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionLoss {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
    pub total: f64,
}

impl DetectionLoss {
    pub fn new(rpn_cls: f64, rpn_reg: f64, roi_cls: f64, roi_reg: f64) -> Self {
        Self {
            rpn_cls,
            rpn_reg,
            roi_cls,
            roi_reg,
            total: rpn_cls + rpn_reg + roi_cls + roi_reg,
        }
    }
}

/// The four terms as graph-connected scalar tensors (batch means).
#[derive(Debug, Clone)]
pub struct DetectionLossTerms {
    pub rpn_cls: Tensor,
    pub rpn_reg: Tensor,
    pub roi_cls: Tensor,
    pub roi_reg: Tensor,
}

impl DetectionLossTerms {
    pub fn total(&self) -> Result<Tensor> {
        Ok((((&self.rpn_cls + &self.rpn_reg)? + &self.roi_cls)? + &self.roi_reg)?)
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("rpn_cls", &self.rpn_cls),
            ("rpn_reg", &self.rpn_reg),
            ("roi_cls", &self.roi_cls),
            ("roi_reg", &self.roi_reg),
        ]
    }

    pub fn values(&self) -> Result<DetectionLoss> {
        Ok(DetectionLoss::new(
            scalar(&self.rpn_cls)?,
            scalar(&self.rpn_reg)?,
            scalar(&self.roi_cls)?,
            scalar(&self.roi_reg)?,
        ))
    }
}

/// Fixed targets for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageTargets {
    pub rpn: RpnTargets,
    /// Sampled RoIs in image coordinates, row-aligned with `roi.labels`.
    pub rois: Vec<BBox>,
    pub roi: RoiTargets,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionTargets {
    pub images: Vec<ImageTargets>,
}

/// Intermediate outputs shared by the loss and inference paths.
#[derive(Debug, Clone)]
pub struct DetectForward {
    pub fpn: FeaturePyramid,
    pub rpn: RpnOutput,
}

#[derive(Debug)]
pub struct DetectionHead {
    cfg: DetectConfig,
    fpn: Fpn,
    rpn: RpnHead,
    roi: RoiHead,
    roi_align: RoiAlignConfig,
    anchors: Vec<BBox>,
    coder: BoxCoder,
    num_classes: usize,
    image_size: (f64, f64),
    accesses: AtomicUsize,
}

impl DetectionHead {
    /// Parameters are registered under `fpn.`, `rpn.` and `roi.` of `pb`'s
    /// root, so pass the root builder.
    pub fn new(
        pb: &ParamBuilder,
        cfg: &DetectConfig,
        backbone: &BackboneConfig,
        height: usize,
        width: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let in_ch: Vec<usize> = (0..NUM_STAGES).map(|i| backbone.stage_channels(i)).collect();
        let fpn = Fpn::new(&pb.pp("fpn"), &in_ch, cfg.fpn_dim)?;
        let rpn = RpnHead::new(&pb.pp("rpn"), cfg.fpn_dim, cfg.anchors.per_location())?;
        let roi = RoiHead::new(
            &pb.pp("roi"),
            cfg.roi_bins * cfg.roi_bins * cfg.fpn_dim,
            cfg.roi_hidden,
            num_classes,
        )?;
        let mut grids: Vec<(usize, usize, usize)> = backbone
            .pyramid_shapes(height, width)
            .into_iter()
            .map(|(_, h, w, s)| (s, h, w))
            .collect();
        let &(s, h, w) = grids.last().expect("four stages");
        grids.push((2 * s, h.div_ceil(2), w.div_ceil(2)));
        let anchors = AnchorSet::generate(&cfg.anchors, &grids).flat();
        Ok(Self {
            cfg: cfg.clone(),
            fpn,
            rpn,
            roi,
            roi_align: RoiAlignConfig {
                bins: cfg.roi_bins,
                sampling: cfg.roi_sampling,
                ..Default::default()
            },
            anchors,
            coder: BoxCoder { std: cfg.delta_std },
            num_classes,
            image_size: (width as f64, height as f64),
            accesses: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &DetectConfig {
        &self.cfg
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    /// Number of times any detection parameter has been read.
    pub fn access_count(&self) -> usize {
        self.accesses.load(Ordering::Relaxed)
    }

    fn touch(&self) {
        self.accesses.fetch_add(1, Ordering::Relaxed);
    }

    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<DetectForward> {
        self.touch();
        let fpn = self.fpn.forward(pyramid)?;
        let rpn = self.rpn.forward(&fpn)?;
        Ok(DetectForward { fpn, rpn })
    }

    fn proposal_config(&self) -> ProposalConfig {
        ProposalConfig {
            pre_nms_top_n: self.cfg.pre_nms_top_n,
            nms_iou: self.cfg.proposal_nms_iou,
            post_nms_top_n: self.cfg.post_nms_top_n,
            min_size: 1e-3,
        }
    }

    /// Matches and samples anchors and RoIs for every image, from detached
    /// RPN outputs. Ground-truth boxes are added to the proposals.
    pub fn build_targets<R: Rng>(&self, fwd: &DetectForward, gts: &[GroundTruth], rng: &mut R) -> Result<DetectionTargets> {
        let mut images = Vec::with_capacity(gts.len());
        for (item, gt) in gts.iter().enumerate() {
            // first stage
            let matches = match_anchors(&self.anchors, &gt.boxes, self.cfg.rpn_pos_iou, self.cfg.rpn_neg_iou)?;
            let pos: Vec<usize> = (0..matches.len()).filter(|&i| matches[i].label == AnchorLabel::Positive).collect();
            let neg: Vec<usize> = (0..matches.len()).filter(|&i| matches[i].label == AnchorLabel::Negative).collect();
            let sample = sample_balanced(&pos, &neg, self.cfg.rpn_batch, self.cfg.rpn_pos_fraction, rng);
            let pos_deltas = sample
                .positives
                .iter()
                .map(|&i| {
                    let g = matches[i].gt.expect("positive anchors carry a match");
                    self.coder.encode(&self.anchors[i], &gt.boxes[g])
                })
                .collect::<Result<Vec<_>>>()?;
            let rpn = RpnTargets {
                positives: sample.positives,
                negatives: sample.negatives,
                pos_deltas,
            };

            // second stage
            let (obj, del) = image_outputs(&fwd.rpn, item)?;
            let mut candidates: Vec<BBox> =
                proposals_for_image(&obj, &del, &self.anchors, &self.coder, self.image_size, &self.proposal_config())
                    .into_iter()
                    .map(|(b, _)| b)
                    .collect();
            candidates.extend(gt.boxes.iter().copied());
            let best: Vec<Option<(usize, f64)>> = candidates
                .iter()
                .map(|p| {
                    gt.boxes
                        .iter()
                        .enumerate()
                        .map(|(j, g)| (j, iou(p, g)))
                        .fold(None, |acc, (j, v)| match acc {
                            Some((_, bv)) if bv >= v => acc,
                            _ => Some((j, v)),
                        })
                })
                .collect();
            let is_fg = |i: usize| matches!(best[i], Some((_, v)) if v >= self.cfg.roi_fg_iou);
            let fg: Vec<usize> = (0..candidates.len()).filter(|&i| is_fg(i)).collect();
            let bg: Vec<usize> = (0..candidates.len()).filter(|&i| !is_fg(i)).collect();
            let s = sample_balanced(&fg, &bg, self.cfg.roi_batch, self.cfg.roi_fg_fraction, rng);
            let mut rois = Vec::with_capacity(s.len());
            let mut roi = RoiTargets::default();
            for &i in &s.positives {
                let (g, _) = best[i].expect("foreground has a match");
                roi.regression.push((rois.len(), self.coder.encode(&candidates[i], &gt.boxes[g])?));
                roi.labels.push(gt.labels[g]);
                rois.push(candidates[i]);
            }
            for &i in &s.negatives {
                roi.labels.push(self.num_classes);
                rois.push(candidates[i]);
            }
            images.push(ImageTargets { rpn, rois, roi });
        }
        Ok(DetectionTargets { images })
    }

    fn image_maps(&self, fpn: &FeaturePyramid, item: usize) -> Result<Vec<(Tensor, usize)>> {
        // RoIs pool from the four backbone-aligned levels only.
        fpn.maps[..NUM_STAGES]
            .iter()
            .map(|m| Ok((m.tensor.get(item)?, m.stride)))
            .collect()
    }

    fn roi_forward(&self, fpn: &FeaturePyramid, item: usize, rois: &[BBox]) -> Result<(Tensor, Tensor)> {
        let pooled = roi_align(&self.image_maps(fpn, item)?, rois, &self.roi_align)?;
        self.roi.forward(&pooled)
    }

    /// The four loss terms, each averaged over the batch.
    pub fn loss(&self, fwd: &DetectForward, targets: &DetectionTargets) -> Result<DetectionLossTerms> {
        self.touch();
        let n = targets.images.len() as f64;
        let mut acc: Option<[Tensor; 4]> = None;
        for (item, t) in targets.images.iter().enumerate() {
            let (rc, rr) = rpn_loss(
                &fwd.rpn.objectness.get(item)?,
                &fwd.rpn.deltas.get(item)?,
                &t.rpn,
                self.cfg.smooth_l1_beta,
            )?;
            let (cls, deltas) = self.roi_forward(&fwd.fpn, item, &t.rois)?;
            let (oc, or) = roi_loss(&cls, &deltas, &t.roi, self.cfg.smooth_l1_beta)?;
            acc = Some(match acc {
                None => [rc, rr, oc, or],
                Some([a, b, c, d]) => [(a + rc)?, (b + rr)?, (c + oc)?, (d + or)?],
            });
        }
        let [a, b, c, d] = acc.ok_or_else(|| crate::Error::config("detection loss needs a non-empty batch"))?;
        Ok(DetectionLossTerms {
            rpn_cls: (a / n)?,
            rpn_reg: (b / n)?,
            roi_cls: (c / n)?,
            roi_reg: (d / n)?,
        })
    }

    /// Convenience wrapper: forward, targets and loss in one call.
    pub fn detection_loss<R: Rng>(&self, pyramid: &FeaturePyramid, gts: &[GroundTruth], rng: &mut R) -> Result<DetectionLossTerms> {
        let fwd = self.forward(pyramid)?;
        let targets = self.build_targets(&fwd, gts, rng)?;
        self.loss(&fwd, &targets)
    }

    /// Inference with the configured thresholds.
    pub fn detect(&self, pyramid: &FeaturePyramid) -> Result<Vec<Vec<Detection>>> {
        self.detect_with(pyramid, self.cfg.score_thr, self.cfg.nms_iou, self.cfg.max_dets)
    }

    pub fn detect_with(
        &self,
        pyramid: &FeaturePyramid,
        score_thr: f64,
        iou_thr: f64,
        max_dets: usize,
    ) -> Result<Vec<Vec<Detection>>> {
        let fwd = self.forward(pyramid)?;
        let batch = fwd.rpn.objectness.dim(0)?;
        let mut out = Vec::with_capacity(batch);
        for item in 0..batch {
            let (obj, del) = image_outputs(&fwd.rpn, item)?;
            let props: Vec<BBox> =
                proposals_for_image(&obj, &del, &self.anchors, &self.coder, self.image_size, &self.proposal_config())
                    .into_iter()
                    .map(|(b, _)| b)
                    .collect();
            if props.is_empty() {
                out.push(Vec::new());
                continue;
            }
            let (logits, deltas) = self.roi_forward(&fwd.fpn, item, &props)?;
            let probs: Vec<Vec<f64>> = softmax_last(&logits)?.to_dtype(DType::F64)?.to_vec2()?;
            let deltas: Vec<Vec<f64>> = deltas.to_dtype(DType::F64)?.to_vec2()?;
            let mut dets = Vec::new();
            for (r, p) in props.iter().enumerate() {
                for c in 0..self.num_classes {
                    let score = probs[r][c];
                    if score < score_thr {
                        continue;
                    }
                    let d = &deltas[r][4 * c..4 * c + 4];
                    let b = self
                        .coder
                        .decode(p, [d[0], d[1], d[2], d[3]])
                        .clip(self.image_size.0, self.image_size.1);
                    if b.width() > 0.0 && b.height() > 0.0 {
                        dets.push(Detection {
                            bbox: b,
                            class_id: c,
                            score,
                        });
                    }
                }
            }
            let mut kept = nms::nms(&dets, iou_thr);
            kept.truncate(max_dets);
            out.push(kept);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Backbone, DetectionHead) {
        let pb = ParamBuilder::new(0, DType::F32, &Device::Cpu);
        let cfg = BackboneConfig::toy();
        let bb = Backbone::new(&pb.pp("backbone"), &cfg, 64, 64).unwrap();
        let det = DetectionHead::new(&pb, &DetectConfig::default(), &cfg, 64, 64, 4).unwrap();
        (bb, det)
    }

    fn image(seed: u64) -> Tensor {
        let pb = ParamBuilder::new(seed, DType::F32, &Device::Cpu);
        pb.get("img", &[1, 64, 64, 3], crate::params::Init::Normal(0.3)).unwrap().detach()
    }

    #[test]
    fn total_is_sum_of_terms() {
        let (bb, det) = setup();
        let pyr = bb.forward(&image(1)).unwrap();
        let gt = GroundTruth {
            boxes: vec![BBox::new(8.0, 8.0, 30.0, 28.0)],
            labels: vec![2],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let terms = det.detection_loss(&pyr, &[gt], &mut rng).unwrap();
        let v = terms.values().unwrap();
        assert_eq!(v.total, v.rpn_cls + v.rpn_reg + v.roi_cls + v.roi_reg);
        assert!((scalar(&terms.total().unwrap()).unwrap() - v.total).abs() < 1e-5);
        for (name, t) in terms.named() {
            assert!(scalar(t).unwrap() >= 0.0, "{name}");
        }
        assert!(v.rpn_reg > 0.0 && v.roi_reg > 0.0);
    }

    #[test]
    fn empty_image_has_zero_regression() {
        let (bb, det) = setup();
        let pyr = bb.forward(&image(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = det
            .detection_loss(&pyr, &[GroundTruth::default()], &mut rng)
            .unwrap()
            .values()
            .unwrap();
        assert_eq!((v.rpn_reg, v.roi_reg), (0.0, 0.0));
        assert!(v.rpn_cls.is_finite() && v.roi_cls.is_finite());
    }

    #[test]
    fn inference_contract() {
        let (bb, det) = setup();
        let pyr = bb.forward(&image(3)).unwrap();
        assert!(det.detect_with(&pyr, 1.0, 0.5, 100).unwrap()[0].is_empty());
        let a = det.detect_with(&pyr, 0.0, 0.5, 7).unwrap();
        let b = det.detect_with(&pyr, 0.0, 0.5, 7).unwrap();
        assert_eq!(a, b);
        assert!(a[0].len() <= 7);
        for d in &a[0] {
            assert!(d.bbox.x_min >= 0.0 && d.bbox.x_max <= 64.0 && d.bbox.y_max <= 64.0);
            assert!((0.0..=1.0).contains(&d.score));
        }
        let dets = det.detect(&pyr).unwrap();
        assert!(dets[0].iter().all(|d| d.score >= 0.05));
    }

    #[test]
    fn detection_json_shape() {
        let d = Detection {
            bbox: BBox::new(1.0, 2.0, 3.0, 4.0),
            class_id: 1,
            score: 0.5,
        };
        assert_eq!(
            serde_json::to_string(&d).unwrap(),
            r#"{"box":[1.0,2.0,3.0,4.0],"class":1,"score":0.5}"#
        );
    }
}
