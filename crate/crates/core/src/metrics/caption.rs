//! Corpus-level caption metrics over whitespace-tokenized sentences.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// One image's candidate caption and its references, already tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionExample {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl CaptionExample {
    /// Splits on whitespace, the same way the training tokenizer does.
    pub fn from_text<S: AsRef<str>>(candidate: &str, references: &[S]) -> Self {
        let split = |s: &str| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
        Self {
            candidate: split(candidate),
            references: references.iter().map(|r| split(r.as_ref())).collect(),
        }
    }
}

fn check(set: &[CaptionExample]) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Metric("caption evaluation set is empty".into()));
    }
    if let Some(i) = set.iter().position(|e| e.references.is_empty()) {
        return Err(Error::Metric(format!("example {i} has no references")));
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-n: clipped n-gram precisions for orders 1..=n pooled over
/// the corpus, geometric mean, times the brevity penalty against the
/// closest reference length (shorter wins ties). No smoothing.
pub fn bleu(set: &[CaptionExample], n: usize) -> Result<f64> {
    check(set)?;
    if !(1..=4).contains(&n) {
        return Err(Error::Metric(format!("BLEU order {n} outside 1..=4")));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for ex in set {
        let c = ex.candidate.len();
        cand_len += c;
        ref_len += ex
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&r| (r.abs_diff(c), r))
            .expect("checked non-empty");
        for k in 1..=n {
            let cand = ngram_counts(&ex.candidate, k);
            let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
            for r in &ex.references {
                for (g, cnt) in ngram_counts(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(cnt);
                }
            }
            for (g, cnt) in &cand {
                matched[k - 1] += (*cnt).min(max_ref.get(g).copied().unwrap_or(0));
                total[k - 1] += cnt;
            }
        }
    }
    if matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure of one candidate against one reference.
pub fn rouge_l_pair(candidate: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over images of the best LCS F-measure across references.
pub fn rouge_l(set: &[CaptionExample]) -> Result<f64> {
    check(set)?;
    let sum: f64 = set
        .iter()
        .map(|ex| {
            ex.references
                .iter()
                .map(|r| rouge_l_pair(&ex.candidate, r))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(sum / set.len() as f64)
}

/// Per-image CIDEr scores (plain variant, ×10). IDF is taken over the
/// reference sets of the whole corpus: `ln(N / df)`.
pub fn cider_per_image(set: &[CaptionExample]) -> Result<Vec<f64>> {
    check(set)?;
    if set.len() < 2 {
        return Err(Error::Metric(
            "CIDEr needs a corpus of at least 2 images for document frequencies".into(),
        ));
    }
    let n_img = set.len() as f64;
    let mut scores = vec![0.0; set.len()];
    for n in 1..=4 {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for ex in set {
            let mut seen: Vec<&[String]> = ex.references.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            seen.sort();
            seen.dedup();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let vector = |tokens: &[String]| -> BTreeMap<Vec<String>, f64> {
            let counts = ngram_counts(tokens, n);
            let len: usize = counts.values().sum();
            counts
                .into_iter()
                .map(|(g, c)| {
                    let idf = (n_img / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
                    (g.to_vec(), c as f64 / len as f64 * idf)
                })
                .collect()
        };
        for (score, ex) in scores.iter_mut().zip(set) {
            let cv = vector(&ex.candidate);
            let sim: f64 = ex
                .references
                .iter()
                .map(|r| cosine(&cv, &vector(r)))
                .sum::<f64>()
                / ex.references.len() as f64;
            *score += sim / 4.0;
        }
    }
    Ok(scores.into_iter().map(|s| 10.0 * s).collect())
}

fn cosine(a: &BTreeMap<Vec<String>, f64>, b: &BTreeMap<Vec<String>, f64>) -> f64 {
    let norm = |v: &BTreeMap<Vec<String>, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    dot / (na * nb)
}

pub fn cider(set: &[CaptionExample]) -> Result<f64> {
    let per = cider_per_image(set)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}
