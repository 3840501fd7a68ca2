//! Greedy non-maximum suppression.

use std::cmp::Ordering;

use super::boxes::{iou, BBox};
use super::Detection;

/// Order used everywhere detections are ranked: score descending, then box
/// coordinates ascending, then class id ascending.
pub fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| cmp_box(&a.bbox, &b.bbox))
        .then_with(|| a.class_id.cmp(&b.class_id))
}

fn cmp_box(a: &BBox, b: &BBox) -> Ordering {
    a.to_array()
        .iter()
        .zip(b.to_array().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Keeps detections greedily by rank, dropping any whose IoU with an
/// already-kept detection of the same class exceeds `iou_thr`.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| rank(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_thr);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Class-agnostic variant over raw boxes; returns kept indices in rank order.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], iou_thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .total_cmp(&scores[i])
            .then_with(|| cmp_box(&boxes[i], &boxes[j]))
            .then_with(|| i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thr) {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(b: [f64; 4], class_id: usize, score: f64) -> Detection {
        Detection {
            bbox: BBox::from(b),
            class_id,
            score,
        }
    }

    #[test]
    fn single_detection_kept() {
        let d = [det([0.0, 0.0, 1.0, 1.0], 0, 0.3)];
        assert_eq!(nms(&d, 0.5), d.to_vec());
    }

    #[test]
    fn identical_boxes_keep_higher_score() {
        let d = [det([0.0, 0.0, 4.0, 4.0], 1, 0.8), det([0.0, 0.0, 4.0, 4.0], 1, 0.9)];
        assert_eq!(nms(&d, 0.5), vec![d[1]]);
    }

    #[test]
    fn different_classes_do_not_suppress() {
        let d = [det([0.0, 0.0, 4.0, 4.0], 0, 0.8), det([0.0, 0.0, 4.0, 4.0], 1, 0.9)];
        assert_eq!(nms(&d, 0.5).len(), 2);
    }

    /// Definition-level oracle: repeatedly take the best remaining detection
    /// by scanning, then strike out everything it suppresses.
    fn oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut alive: Vec<Detection> = dets.to_vec();
        let mut kept = Vec::new();
        while !alive.is_empty() {
            let mut best = 0;
            for i in 1..alive.len() {
                if rank(&alive[i], &alive[best]) == Ordering::Less {
                    best = i;
                }
            }
            let b = alive.remove(best);
            alive.retain(|d| !(d.class_id == b.class_id && iou(&d.bbox, &b.bbox) > thr));
            kept.push(b);
        }
        kept
    }

    #[test]
    fn six_box_fixture() {
        let d = [
            det([0.0, 0.0, 10.0, 10.0], 0, 0.9),
            det([1.0, 1.0, 11.0, 11.0], 0, 0.8),
            det([20.0, 20.0, 30.0, 30.0], 0, 0.7),
            det([0.0, 0.0, 10.0, 10.0], 1, 0.6),
            det([21.0, 21.0, 31.0, 31.0], 0, 0.95),
            det([5.0, 0.0, 15.0, 10.0], 0, 0.5),
        ];
        let kept = nms(&d, 0.5);
        assert_eq!(kept, oracle(&d, 0.5));
        assert_eq!(kept, vec![d[4], d[0], d[3], d[5]]);
    }

    #[test]
    fn random_instances_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let n = rng.random_range(0..=8);
            let d: Vec<Detection> = (0..n)
                .map(|_| {
                    let x = rng.random_range(0..10) as f64;
                    let y = rng.random_range(0..10) as f64;
                    let s = rng.random_range(1..8) as f64;
                    // coarse scores force ties through the box tie-break
                    det([x, y, x + s, y + s], rng.random_range(0..2), rng.random_range(0..4) as f64 / 4.0)
                })
                .collect();
            let thr = [0.3, 0.5, 0.7][rng.random_range(0..3)];
            assert_eq!(nms(&d, thr), oracle(&d, thr));
        }
    }

    #[test]
    fn index_variant_is_class_agnostic() {
        let boxes = [BBox::new(0.0, 0.0, 4.0, 4.0), BBox::new(0.0, 0.0, 4.0, 4.5), BBox::new(9.0, 9.0, 10.0, 10.0)];
        assert_eq!(nms_indices(&boxes, &[0.5, 0.6, 0.1], 0.7), vec![1, 2]);
    }
}
