//! Caption and detection evaluation, and the combined report row.

pub mod caption;
pub mod detection;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detect::{Detection, GroundTruth};
use crate::error::{Error, Result};
use crate::model::JointModel;
use crate::scenegen::{SceneRecord, Vocabulary};
pub use caption::{bleu, cider, cider_per_image, rouge_l, CaptionExample};
pub use detection::{coco_map, match_records, DetectionExample, MapReport, MatchRecord, SizeBuckets};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionScores {
    #[serde(rename = "B1")]
    pub b1: f64,
    #[serde(rename = "B2")]
    pub b2: f64,
    #[serde(rename = "B3")]
    pub b3: f64,
    #[serde(rename = "B4")]
    pub b4: f64,
    #[serde(rename = "RougeL")]
    pub rouge_l: f64,
    #[serde(rename = "CIDEr")]
    pub cider: f64,
}

/// CIDEr needs at least two images; a single-image set reports 0 for it
/// rather than failing the whole evaluation.
pub fn caption_scores(set: &[CaptionExample]) -> Result<CaptionScores> {
    Ok(CaptionScores {
        b1: bleu(set, 1)?,
        b2: bleu(set, 2)?,
        b3: bleu(set, 3)?,
        b4: bleu(set, 4)?,
        rouge_l: rouge_l(set)?,
        cider: if set.len() >= 2 { cider(set)? } else { 0.0 },
    })
}

/// One full evaluation row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub caption: CaptionScores,
    #[serde(flatten)]
    pub detection: MapReport,
}

pub const REPORT_COLUMNS: [&str; 12] = [
    "B1", "B2", "B3", "B4", "RougeL", "CIDEr", "mAP", "AP50", "AP75", "AP_S", "AP_M", "AP_L",
];

impl EvalReport {
    pub fn values(&self) -> [f64; 12] {
        let c = &self.caption;
        let d = &self.detection;
        [c.b1, c.b2, c.b3, c.b4, c.rouge_l, c.cider, d.map, d.ap50, d.ap75, d.ap_s, d.ap_m, d.ap_l]
    }

    /// Header plus one row; `key` prepends a leading column (e.g. λ).
    pub fn write_csv<W: Write>(rows: &[(Option<String>, EvalReport)], key: Option<&str>, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = key.into_iter().collect();
        header.extend(REPORT_COLUMNS);
        w.write_record(&header)?;
        for (k, r) in rows {
            let mut rec: Vec<String> = k.iter().cloned().collect();
            rec.extend(r.values().iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("csv output", e))?;
        Ok(())
    }
}

/// Model outputs for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub caption: String,
    pub logprob: f64,
    pub detections: Vec<Detection>,
}

/// Beam-search captions and detections for every record.
pub fn predict(model: &JointModel, records: &[SceneRecord], vocab: &Vocabulary, beam: usize) -> Result<Vec<Prediction>> {
    records
        .iter()
        .map(|r| {
            let (hyp, detections) = model.caption_and_detect(&r.image, beam)?;
            Ok(Prediction {
                id: r.id.clone(),
                caption: vocab.detokenize(&hyp.tokens),
                logprob: hyp.logprob,
                detections,
            })
        })
        .collect()
}

/// Scores predictions against the records they were made for.
pub fn score(predictions: &[Prediction], records: &[SceneRecord], num_classes: usize, image_size: usize) -> Result<EvalReport> {
    if predictions.len() != records.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} records",
            predictions.len(),
            records.len()
        )));
    }
    let captions: Vec<CaptionExample> = predictions
        .iter()
        .zip(records)
        .map(|(p, r)| CaptionExample::from_text(&p.caption, &r.captions))
        .collect();
    Ok(EvalReport {
        caption: caption_scores(&captions)?,
        detection: coco_map(&detection_examples(predictions, records), num_classes, image_size)?,
    })
}

/// Pairs each prediction's detections with its record's ground truth.
pub fn detection_examples(predictions: &[Prediction], records: &[SceneRecord]) -> Vec<DetectionExample> {
    predictions
        .iter()
        .zip(records)
        .map(|(p, r)| DetectionExample {
            detections: p.detections.clone(),
            truth: GroundTruth {
                boxes: r.boxes.clone(),
                labels: r.labels.clone(),
            },
        })
        .collect()
}

/// Beam-`beam` captioning plus detection over `records`, fully scored.
pub fn evaluate(model: &JointModel, records: &[SceneRecord], vocab: &Vocabulary, beam: usize) -> Result<EvalReport> {
    let preds = predict(model, records, vocab, beam)?;
    let cfg = model.config();
    score(&preds, records, cfg.num_classes, cfg.image_size)
}

/// Footer documenting the rescaled size buckets.
pub fn size_bucket_note(image_size: usize) -> String {
    let b = SizeBuckets::for_image_size(image_size);
    format!(
        "AP_S/AP_M/AP_L use gt box area < {:.1} px², < {:.1} px², and above (COCO 32²/96² scaled by ({image_size}/640)²); -1 marks an empty bucket",
        b.small_max, b.medium_max
    )
}
