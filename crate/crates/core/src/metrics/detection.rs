//! COCO-style average precision: per class and IoU threshold, greedy
//! score-ordered matching, 101-point interpolated precision, then means over
//! classes and thresholds. Size buckets follow COCO's ignore semantics.

use serde::{Deserialize, Serialize};

use crate::detect::boxes::{iou, BBox};
use crate::detect::{Detection, GroundTruth};
use crate::error::{Error, Result};

/// Predictions and ground truth for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionExample {
    pub detections: Vec<Detection>,
    pub truth: GroundTruth,
}

/// `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

pub const RECALL_POINTS: usize = 101;

/// Half-open area range `[lo, hi)` in square pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRange {
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange {
        lo: 0.0,
        hi: f64::INFINITY,
    };

    fn contains(&self, area: f64) -> bool {
        area >= self.lo && area < self.hi
    }
}

/// COCO's 32² / 96² bucket edges, rescaled from 640-pixel images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeBuckets {
    pub small_max: f64,
    pub medium_max: f64,
}

impl SizeBuckets {
    pub fn for_image_size(size: usize) -> Self {
        let s = size as f64 / 640.0;
        Self {
            small_max: (32.0 * s).powi(2),
            medium_max: (96.0 * s).powi(2),
        }
    }

    pub fn ranges(&self) -> [AreaRange; 3] {
        [
            AreaRange { lo: 0.0, hi: self.small_max },
            AreaRange { lo: self.small_max, hi: self.medium_max },
            AreaRange { lo: self.medium_max, hi: f64::INFINITY },
        ]
    }
}

/// All detection columns. `-1` marks an AP that is undefined because no
/// ground truth falls in its class/size selection (COCO convention).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "AP_S")]
    pub ap_s: f64,
    #[serde(rename = "AP_M")]
    pub ap_m: f64,
    #[serde(rename = "AP_L")]
    pub ap_l: f64,
}

/// How one detection fared at one IoU threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub image: usize,
    pub detection: usize,
    pub class: usize,
    pub score: f64,
    pub gt: Option<usize>,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Outcome {
    Tp,
    Fp,
    Ignored,
}

fn validate(set: &[DetectionExample], num_classes: usize) -> Result<()> {
    for (i, ex) in set.iter().enumerate() {
        if let Some(d) = ex.detections.iter().find(|d| d.class_id >= num_classes) {
            return Err(Error::Metric(format!(
                "image {i}: detection class {} outside the {num_classes}-class label space",
                d.class_id
            )));
        }
        if let Some(&l) = ex.truth.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Metric(format!(
                "image {i}: ground-truth class {l} outside the {num_classes}-class label space"
            )));
        }
        if ex.truth.labels.len() != ex.truth.boxes.len() {
            return Err(Error::Metric(format!("image {i}: boxes and labels differ in length")));
        }
    }
    Ok(())
}

/// Score-ordered detections of one class: `(score, image, index, box)`.
fn ranked(set: &[DetectionExample], class: usize) -> Vec<(f64, usize, usize, BBox)> {
    let mut dets: Vec<_> = set
        .iter()
        .enumerate()
        .flat_map(|(img, ex)| {
            ex.detections
                .iter()
                .enumerate()
                .filter(move |(_, d)| d.class_id == class)
                .map(move |(k, d)| (d.score, img, k, d.bbox))
        })
        .collect();
    dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    dets
}

/// Greedy matching for one class; returns per-detection outcomes in ranked
/// order, the matched gt ids and IoUs, and the count of non-ignored gts.
#[allow(clippy::type_complexity)]
fn match_class(
    set: &[DetectionExample],
    class: usize,
    thr: f64,
    range: AreaRange,
) -> (Vec<(f64, usize, usize, BBox)>, Vec<(Outcome, Option<usize>, f64)>, usize) {
    let dets = ranked(set, class);
    // per image: (gt index, box, ignored)
    let gts: Vec<Vec<(usize, BBox, bool)>> = set
        .iter()
        .map(|ex| {
            ex.truth
                .boxes
                .iter()
                .zip(&ex.truth.labels)
                .enumerate()
                .filter(|(_, (_, &l))| l == class)
                .map(|(j, (b, _))| (j, *b, !range.contains(b.area())))
                .collect()
        })
        .collect();
    let npos = gts.iter().flatten().filter(|g| !g.2).count();
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut out = Vec::with_capacity(dets.len());
    for &(_, img, _, b) in &dets {
        // prefer the best non-ignored gt; fall back to an ignored one
        let mut best: Option<(usize, f64, bool)> = None;
        for (slot, &(_, g, ignored)) in gts[img].iter().enumerate() {
            if taken[img][slot] {
                continue;
            }
            let v = iou(&b, &g);
            if v < thr {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bv, bign)) => (bign && !ignored) || (bign == ignored && v > bv),
            };
            if better {
                best = Some((slot, v, ignored));
            }
        }
        match best {
            Some((slot, v, ignored)) => {
                taken[img][slot] = true;
                let outcome = if ignored { Outcome::Ignored } else { Outcome::Tp };
                out.push((outcome, Some(gts[img][slot].0), v));
            }
            None => {
                let outcome = if range.contains(b.area()) { Outcome::Fp } else { Outcome::Ignored };
                out.push((outcome, None, 0.0));
            }
        }
    }
    (dets, out, npos)
}

/// 101-point interpolated AP from outcomes in score order.
fn interpolated_ap(outcomes: &[Outcome], npos: usize) -> f64 {
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Tp => tp += 1,
            Outcome::Fp => fp += 1,
            Outcome::Ignored => continue,
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let sum: f64 = (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            let i = recall.partition_point(|&x| x < r);
            precision.get(i).copied().unwrap_or(0.0)
        })
        .sum();
    sum / RECALL_POINTS as f64
}

/// AP of one class at one threshold; `None` when the selection has no
/// ground truth.
pub fn average_precision(set: &[DetectionExample], class: usize, thr: f64, range: AreaRange) -> Option<f64> {
    let (_, out, npos) = match_class(set, class, thr, range);
    if npos == 0 {
        return None;
    }
    let outcomes: Vec<Outcome> = out.iter().map(|o| o.0).collect();
    Some(interpolated_ap(&outcomes, npos))
}

fn mean_ap(set: &[DetectionExample], num_classes: usize, thresholds: &[f64], range: AreaRange) -> f64 {
    let aps: Vec<f64> = thresholds
        .iter()
        .flat_map(|&t| (0..num_classes).filter_map(move |c| average_precision(set, c, t, range)))
        .collect();
    if aps.is_empty() {
        -1.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

pub fn coco_map(set: &[DetectionExample], num_classes: usize, image_size: usize) -> Result<MapReport> {
    validate(set, num_classes)?;
    let all = iou_thresholds();
    let [s, m, l] = SizeBuckets::for_image_size(image_size).ranges();
    Ok(MapReport {
        map: mean_ap(set, num_classes, &all, AreaRange::ALL),
        ap50: mean_ap(set, num_classes, &[0.5], AreaRange::ALL),
        ap75: mean_ap(set, num_classes, &[0.75], AreaRange::ALL),
        ap_s: mean_ap(set, num_classes, &all, s),
        ap_m: mean_ap(set, num_classes, &all, m),
        ap_l: mean_ap(set, num_classes, &all, l),
    })
}

/// Per-detection match results at one threshold, for debugging dumps.
pub fn match_records(set: &[DetectionExample], num_classes: usize, thr: f64) -> Result<Vec<MatchRecord>> {
    validate(set, num_classes)?;
    let mut records = Vec::new();
    for class in 0..num_classes {
        let (dets, out, _) = match_class(set, class, thr, AreaRange::ALL);
        for ((score, image, detection, _), (_, gt, v)) in dets.into_iter().zip(out) {
            records.push(MatchRecord {
                image,
                detection,
                class,
                score,
                gt,
                iou: v,
            });
        }
    }
    records.sort_by_key(|r| (r.image, r.detection));
    Ok(records)
}
