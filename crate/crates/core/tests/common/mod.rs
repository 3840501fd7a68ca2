//! Brute-force reference implementations and fixtures shared by the
//! integration tests. The oracles are written from the metric definitions
//! directly (string n-grams, subset enumeration, COCO's per-image matching
//! loop) and deliberately share no code with the library.

#![allow(dead_code)]

use std::collections::HashMap;

use capdet::detect::boxes::BBox;
use capdet::detect::{Detection, GroundTruth};
use capdet::metrics::DetectionExample;
use rand::Rng;

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Occurrences of `gram` in `seq` by sliding comparison.
fn occurrences(seq: &[String], gram: &[String]) -> usize {
    if gram.len() > seq.len() {
        return 0;
    }
    (0..=seq.len() - gram.len()).filter(|&i| &seq[i..i + gram.len()] == gram).count()
}

fn distinct_grams(seq: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    if seq.len() >= n {
        for i in 0..=seq.len() - n {
            let g = seq[i..i + n].to_vec();
            if !out.contains(&g) {
                out.push(g);
            }
        }
    }
    out
}

/// Corpus BLEU-n: clipped counts summed over the corpus, closest reference
/// length (shorter wins ties), geometric mean of the n precisions.
pub fn bleu_oracle(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], n: usize) -> f64 {
    let mut clipped = vec![0.0; n];
    let mut totals = vec![0.0; n];
    let (mut c_len, mut r_len) = (0.0, 0.0);
    for (c, rs) in cands.iter().zip(refs) {
        c_len += c.len() as f64;
        let mut lens: Vec<usize> = rs.iter().map(Vec::len).collect();
        lens.sort_by_key(|&l| ((l as i64 - c.len() as i64).abs(), l));
        r_len += lens[0] as f64;
        for k in 1..=n {
            for g in distinct_grams(c, k) {
                let cnt = occurrences(c, &g);
                let cap = rs.iter().map(|r| occurrences(r, &g)).max().unwrap_or(0);
                clipped[k - 1] += cnt.min(cap) as f64;
                totals[k - 1] += cnt as f64;
            }
        }
    }
    let mut product = 1.0;
    for k in 0..n {
        if totals[k] == 0.0 || clipped[k] == 0.0 {
            return 0.0;
        }
        product *= clipped[k] / totals[k];
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len / c_len).exp() };
    bp * product.powf(1.0 / n as f64)
}

/// Longest common subsequence by trying every subset of `a`, longest first.
fn lcs_by_subsets(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 16, "oracle is exponential");
    let is_subseq = |sub: &[&String]| {
        let mut it = b.iter();
        sub.iter().all(|x| it.any(|y| y == *x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let size = mask.count_ones() as usize;
        if size <= best {
            continue;
        }
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if is_subseq(&sub) {
            best = size;
        }
    }
    best
}

pub fn rouge_l_oracle(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let beta2 = 1.2f64 * 1.2;
    let mut sum = 0.0;
    for (c, rs) in cands.iter().zip(refs) {
        let mut best: f64 = 0.0;
        for r in rs {
            let l = lcs_by_subsets(c, r) as f64;
            if l == 0.0 {
                continue;
            }
            let p = l / c.len() as f64;
            let rc = l / r.len() as f64;
            best = best.max((1.0 + beta2) * p * rc / (rc + beta2 * p));
        }
        sum += best;
    }
    sum / cands.len() as f64
}

/// Plain CIDEr with n-grams keyed as joined strings.
pub fn cider_oracle(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let images = cands.len() as f64;
    let key = |g: &[String]| g.join("\u{1}");
    let tf = |s: &[String], n: usize| -> HashMap<String, f64> {
        let mut m = HashMap::new();
        if s.len() >= n {
            let total = (s.len() - n + 1) as f64;
            for i in 0..=s.len() - n {
                *m.entry(key(&s[i..i + n])).or_insert(0.0) += 1.0 / total;
            }
        }
        m
    };
    let mut per_image = vec![0.0; cands.len()];
    for n in 1..=4 {
        let mut df: HashMap<String, f64> = HashMap::new();
        for rs in refs {
            let mut seen: Vec<String> = Vec::new();
            for r in rs {
                for k in tf(r, n).into_keys() {
                    if !seen.contains(&k) {
                        seen.push(k);
                    }
                }
            }
            for k in seen {
                *df.entry(k).or_insert(0.0) += 1.0;
            }
        }
        let weigh = |v: HashMap<String, f64>| -> HashMap<String, f64> {
            v.into_iter()
                .map(|(k, x)| {
                    let d = df.get(&k).copied().unwrap_or(0.0).max(1.0);
                    (k, x * (images / d).ln())
                })
                .collect()
        };
        for (i, (c, rs)) in cands.iter().zip(refs).enumerate() {
            let vc = weigh(tf(c, n));
            let mut sim = 0.0;
            for r in rs {
                let vr = weigh(tf(r, n));
                let dot: f64 = vc.iter().map(|(k, x)| x * vr.get(k).copied().unwrap_or(0.0)).sum();
                let na = vc.values().map(|x| x * x).sum::<f64>().sqrt();
                let nb = vr.values().map(|x| x * x).sum::<f64>().sqrt();
                if na > 0.0 && nb > 0.0 {
                    sim += dot / (na * nb);
                }
            }
            per_image[i] += sim / rs.len() as f64 / 4.0;
        }
    }
    10.0 * per_image.iter().sum::<f64>() / images
}

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let area = |r: &BBox| (r.x_max - r.x_min) * (r.y_max - r.y_min);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn area(b: &BBox) -> f64 {
    (b.x_max - b.x_min) * (b.y_max - b.y_min)
}

/// AP of one class at one IoU threshold and area range, following COCO's
/// evaluation loop: per image, gts sorted with in-range ones first; each
/// detection (by descending score) takes the unmatched gt with the highest
/// IoU ≥ threshold, never trading a real match for an out-of-range one;
/// unmatched out-of-range detections are ignored. Precision is made
/// monotone and sampled at 101 recall points by direct maximisation.
pub fn ap_oracle(set: &[DetectionExample], class: usize, thr: f64, lo: f64, hi: f64) -> Option<f64> {
    let in_range = |a: f64| a >= lo && a < hi;
    // (score, image, index, tp, ignored)
    let mut scored: Vec<(f64, usize, usize, bool, bool)> = Vec::new();
    let mut npos = 0;
    for (img, ex) in set.iter().enumerate() {
        let mut gts: Vec<(BBox, bool)> = ex
            .truth
            .boxes
            .iter()
            .zip(&ex.truth.labels)
            .filter(|(_, &l)| l == class)
            .map(|(b, _)| (*b, !in_range(area(b))))
            .collect();
        gts.sort_by_key(|g| g.1);
        npos += gts.iter().filter(|g| !g.1).count();
        let mut dets: Vec<(usize, &Detection)> =
            ex.detections.iter().enumerate().filter(|(_, d)| d.class_id == class).collect();
        dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
        let mut used = vec![false; gts.len()];
        for (k, d) in dets {
            let mut best = thr;
            let mut m: Option<usize> = None;
            for (j, (g, ign)) in gts.iter().enumerate() {
                if used[j] {
                    continue;
                }
                if let Some(prev) = m {
                    if !gts[prev].1 && *ign {
                        break;
                    }
                }
                let v = box_iou(&d.bbox, g);
                if v < best {
                    continue;
                }
                best = v;
                m = Some(j);
            }
            match m {
                Some(j) => {
                    used[j] = true;
                    scored.push((d.score, img, k, !gts[j].1, gts[j].1));
                }
                None => scored.push((d.score, img, k, false, !in_range(area(&d.bbox)))),
            }
        }
    }
    if npos == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let kept: Vec<bool> = scored.iter().filter(|s| !s.4).map(|s| s.3).collect();
    let mut pr = Vec::new();
    let mut tp = 0.0;
    for (i, &hit) in kept.iter().enumerate() {
        if hit {
            tp += 1.0;
        }
        pr.push((tp / (i + 1) as f64, tp / npos as f64));
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        sum += pr.iter().filter(|p| p.1 >= r).map(|p| p.0).fold(0.0, f64::max);
    }
    Some(sum / 101.0)
}

/// Mean of the defined APs over classes and thresholds; -1 if none.
pub fn map_oracle(set: &[DetectionExample], num_classes: usize, thresholds: &[f64], lo: f64, hi: f64) -> f64 {
    let mut aps = Vec::new();
    for &t in thresholds {
        for c in 0..num_classes {
            if let Some(ap) = ap_oracle(set, c, t, lo, hi) {
                aps.push(ap);
            }
        }
    }
    if aps.is_empty() {
        -1.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

pub fn random_sentence<R: Rng>(rng: &mut R, vocab: &[&str], max_len: usize) -> Vec<String> {
    let len = rng.random_range(1..=max_len);
    (0..len).map(|_| vocab[rng.random_range(0..vocab.len())].to_string()).collect()
}

fn random_box<R: Rng>(rng: &mut R, size: f64) -> BBox {
    let w = rng.random_range(3.0..size / 2.0);
    let h = rng.random_range(3.0..size / 2.0);
    let x = rng.random_range(0.0..size - w);
    let y = rng.random_range(0.0..size - h);
    BBox {
        x_min: x,
        y_min: y,
        x_max: x + w,
        y_max: y + h,
    }
}

fn jitter<R: Rng>(rng: &mut R, b: &BBox, amount: f64) -> BBox {
    let mut d = || rng.random_range(-amount..amount);
    let (x0, y0) = (b.x_min + d(), b.y_min + d());
    let (x1, y1) = (b.x_max + d(), b.y_max + d());
    BBox {
        x_min: x0.min(x1 - 1.0),
        y_min: y0.min(y1 - 1.0),
        x_max: x1,
        y_max: y1,
    }
}

/// A small random detection problem: up to four images, some detections
/// near ground truth (so IoUs spread across the thresholds), some pure
/// clutter, and coarse scores so that ties occur.
pub fn random_detection_set<R: Rng>(rng: &mut R, num_classes: usize, size: f64) -> Vec<DetectionExample> {
    let images = rng.random_range(1..=4);
    (0..images)
        .map(|_| {
            let n_gt = rng.random_range(0..=3);
            let boxes: Vec<BBox> = (0..n_gt).map(|_| random_box(rng, size)).collect();
            let labels: Vec<usize> = (0..n_gt).map(|_| rng.random_range(0..num_classes)).collect();
            let mut detections = Vec::new();
            for (b, &l) in boxes.iter().zip(&labels) {
                for _ in 0..rng.random_range(0..=2) {
                    let amount = rng.random_range(0.5..8.0);
                    let class_id = if rng.random_bool(0.85) { l } else { rng.random_range(0..num_classes) };
                    detections.push(Detection {
                        bbox: jitter(rng, b, amount),
                        class_id,
                        score: (rng.random_range(1..=10) as f64) / 10.0,
                    });
                }
            }
            for _ in 0..rng.random_range(0..=2) {
                detections.push(Detection {
                    bbox: random_box(rng, size),
                    class_id: rng.random_range(0..num_classes),
                    score: (rng.random_range(1..=10) as f64) / 10.0,
                });
            }
            DetectionExample {
                detections,
                truth: GroundTruth { boxes, labels },
            }
        })
        .collect()
}
