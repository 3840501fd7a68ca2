//! Anchor tiling, anchor-to-ground-truth matching and balanced sampling.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::boxes::{iou, BBox};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Anchor side (at ratio 1) as a multiple of the level stride.
    pub scale_factor: f64,
    /// Height / width ratios.
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scale_factor: 4.0,
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    pub fn per_location(&self) -> usize {
        self.ratios.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelAnchors {
    pub stride: usize,
    pub grid: (usize, usize),
    /// Ordered by (row, column, ratio).
    pub boxes: Vec<BBox>,
}

/// Anchors of every pyramid level. Boxes may extend past the image border.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub levels: Vec<LevelAnchors>,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl AnchorSet {
    /// `grids` holds `(stride, height, width)` per level.
    pub fn generate(cfg: &AnchorConfig, grids: &[(usize, usize, usize)]) -> Self {
        let mut levels = Vec::with_capacity(grids.len());
        let mut scales = Vec::with_capacity(grids.len());
        for &(stride, gh, gw) in grids {
            let scale = cfg.scale_factor * stride as f64;
            scales.push(scale);
            let mut boxes = Vec::with_capacity(gh * gw * cfg.ratios.len());
            for y in 0..gh {
                for x in 0..gw {
                    let cx = (x as f64 + 0.5) * stride as f64;
                    let cy = (y as f64 + 0.5) * stride as f64;
                    for &r in &cfg.ratios {
                        let w = scale / r.sqrt();
                        let h = scale * r.sqrt();
                        boxes.push(BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0));
                    }
                }
            }
            levels.push(LevelAnchors {
                stride,
                grid: (gh, gw),
                boxes,
            });
        }
        Self {
            levels,
            scales,
            ratios: cfg.ratios.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.boxes.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All anchors in level order, matching the flattened RPN outputs.
    pub fn flat(&self) -> Vec<BBox> {
        self.levels.iter().flat_map(|l| l.boxes.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorMatch {
    pub label: AnchorLabel,
    /// Ground-truth index the anchor regresses to (set for positives, and
    /// for every anchor with some overlap).
    pub gt: Option<usize>,
    pub max_iou: f64,
}

/// Labels anchors by their best IoU against `gts`: `≥ pos_thr` positive,
/// `< neg_thr` negative, otherwise ignored. In addition, each ground truth's
/// best-overlapping anchor(s) become positive for that ground truth.
pub fn match_anchors(anchors: &[BBox], gts: &[BBox], pos_thr: f64, neg_thr: f64) -> Result<Vec<AnchorMatch>> {
    if pos_thr <= neg_thr {
        return Err(Error::config(format!(
            "positive threshold {pos_thr} must exceed negative threshold {neg_thr}"
        )));
    }
    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|g| iou(a, g)).collect())
        .collect();
    let mut out: Vec<AnchorMatch> = ious
        .iter()
        .map(|row| {
            let best = row
                .iter()
                .enumerate()
                .fold(None, |acc: Option<(usize, f64)>, (j, &v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((j, v)),
                });
            match best {
                Some((j, v)) => AnchorMatch {
                    label: if v >= pos_thr {
                        AnchorLabel::Positive
                    } else if v < neg_thr {
                        AnchorLabel::Negative
                    } else {
                        AnchorLabel::Ignore
                    },
                    gt: (v > 0.0).then_some(j),
                    max_iou: v,
                },
                None => AnchorMatch {
                    label: AnchorLabel::Negative,
                    gt: None,
                    max_iou: 0.0,
                },
            }
        })
        .collect();
    for j in 0..gts.len() {
        let best = ious.iter().map(|row| row[j]).fold(0.0, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (i, row) in ious.iter().enumerate() {
            if row[j] == best {
                out[i].label = AnchorLabel::Positive;
                out[i].gt = Some(j);
            }
        }
    }
    Ok(out)
}

/// Indices chosen for a classification loss, with their binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws at most `size` indices with at most `max_pos_fraction` positives,
/// filling the remainder with negatives. Output lists are sorted.
pub fn sample_balanced<R: Rng>(
    positives: &[usize],
    negatives: &[usize],
    size: usize,
    max_pos_fraction: f64,
    rng: &mut R,
) -> Sample {
    let max_pos = (size as f64 * max_pos_fraction).floor() as usize;
    let n_pos = positives.len().min(max_pos);
    let n_neg = negatives.len().min(size - n_pos);
    let mut pos: Vec<usize> = positives.choose_multiple(rng, n_pos).copied().collect();
    let mut neg: Vec<usize> = negatives.choose_multiple(rng, n_neg).copied().collect();
    pos.sort_unstable();
    neg.sort_unstable();
    Sample {
        positives: pos,
        negatives: neg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchor_counts_per_level() {
        let set = AnchorSet::generate(&AnchorConfig::default(), &[(4, 32, 32), (8, 16, 16), (64, 2, 2)]);
        assert_eq!(set.levels[0].boxes.len(), 32 * 32 * 3);
        assert_eq!(set.levels[2].boxes.len(), 2 * 2 * 3);
        assert_eq!(set.len(), (1024 + 256 + 4) * 3);
        assert_eq!(set.scales, vec![16.0, 32.0, 256.0]);
        let a = set.levels[0].boxes[1];
        assert_eq!(a, BBox::new(-6.0, -6.0, 10.0, 10.0));
        let tall = set.levels[0].boxes[2];
        assert!((tall.height() / tall.width() - 2.0).abs() < 1e-12);
        assert!((tall.area() - 256.0).abs() < 1e-9);
    }

    #[test]
    fn anchor_equal_to_gt_is_positive() {
        let gt = BBox::new(10.0, 10.0, 30.0, 30.0);
        let anchors = [BBox::new(0.0, 0.0, 5.0, 5.0), gt, BBox::new(12.0, 12.0, 28.0, 28.0)];
        let m = match_anchors(&anchors, &[gt], 0.7, 0.3).unwrap();
        assert_eq!(m[1].label, AnchorLabel::Positive);
        assert_eq!(m[1].gt, Some(0));
        assert_eq!(m[0].label, AnchorLabel::Negative);
    }

    #[test]
    fn no_gt_means_all_negative() {
        let anchors = [BBox::new(0.0, 0.0, 5.0, 5.0), BBox::new(1.0, 1.0, 3.0, 3.0)];
        let m = match_anchors(&anchors, &[], 0.7, 0.3).unwrap();
        assert!(m.iter().all(|x| x.label == AnchorLabel::Negative && x.gt.is_none()));
    }

    #[test]
    fn thresholds_must_be_ordered() {
        assert!(match_anchors(&[], &[], 0.3, 0.7).is_err());
    }

    /// Rule oracle: recomputes labels straight from the definition.
    fn oracle(anchors: &[BBox], gts: &[BBox], pos: f64, neg: f64) -> Vec<AnchorLabel> {
        anchors
            .iter()
            .map(|a| {
                let best = gts.iter().map(|g| iou(a, g)).fold(0.0, f64::max);
                let forced = gts.iter().any(|g| {
                    let gbest = anchors.iter().map(|b| iou(b, g)).fold(0.0, f64::max);
                    gbest > 0.0 && iou(a, g) == gbest
                });
                if forced || best >= pos {
                    AnchorLabel::Positive
                } else if best < neg {
                    AnchorLabel::Negative
                } else {
                    AnchorLabel::Ignore
                }
            })
            .collect()
    }

    #[test]
    fn three_by_two_fixture_matches_rules() {
        let gts = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 20.0, 30.0, 30.0)];
        let anchors = [
            BBox::new(0.0, 0.0, 10.0, 9.0),   // iou 0.9 with gt0
            BBox::new(2.0, 2.0, 12.0, 12.0),  // ~0.47 with gt0
            BBox::new(24.0, 24.0, 34.0, 34.0), // ~0.22 with gt1, its best
        ];
        let m = match_anchors(&anchors, &gts, 0.7, 0.3).unwrap();
        let labels: Vec<_> = m.iter().map(|x| x.label).collect();
        assert_eq!(labels, oracle(&anchors, &gts, 0.7, 0.3));
        assert_eq!(
            labels,
            vec![AnchorLabel::Positive, AnchorLabel::Ignore, AnchorLabel::Positive]
        );
        assert_eq!(m[2].gt, Some(1));
    }

    #[test]
    fn random_small_instances_match_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rbox = |rng: &mut ChaCha8Rng| {
            let x = rng.random_range(0.0..20.0);
            let y = rng.random_range(0.0..20.0);
            BBox::new(x, y, x + rng.random_range(1.0..12.0), y + rng.random_range(1.0..12.0))
        };
        for _ in 0..200 {
            let na = rng.random_range(1..=16);
            let ng = rng.random_range(0..=3);
            let anchors: Vec<_> = (0..na).map(|_| rbox(&mut rng)).collect();
            let gts: Vec<_> = (0..ng).map(|_| rbox(&mut rng)).collect();
            let m = match_anchors(&anchors, &gts, 0.5, 0.2).unwrap();
            let labels: Vec<_> = m.iter().map(|x| x.label).collect();
            assert_eq!(labels, oracle(&anchors, &gts, 0.5, 0.2));
            for x in &m {
                if x.label == AnchorLabel::Positive {
                    assert!(x.gt.is_some());
                }
            }
        }
    }

    #[test]
    fn sampler_respects_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos: Vec<usize> = (0..100).collect();
        let neg: Vec<usize> = (100..1000).collect();
        let s = sample_balanced(&pos, &neg, 64, 0.5, &mut rng);
        assert_eq!((s.positives.len(), s.negatives.len()), (32, 32));
        let s = sample_balanced(&pos[..5], &neg, 64, 0.5, &mut rng);
        assert_eq!((s.positives.len(), s.negatives.len()), (5, 59));
        let s = sample_balanced(&[], &[], 64, 0.5, &mut rng);
        assert!(s.is_empty());
        let s = sample_balanced(&pos, &neg, 32, 0.25, &mut rng);
        assert_eq!((s.positives.len(), s.negatives.len()), (8, 24));
    }
}
