//! COCO annotation ingestion into the manifest format.
//!
//! Accepts one JSON file holding `images`, `categories` and `annotations`,
//! where an annotation is either an instance (`bbox` + `category_id`) or a
//! caption (`caption`), i.e. the instances and captions files merged.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::dataset::ManifestEntry;
use super::CAPTIONS_PER_RECORD;
use crate::detect::boxes::BBox;
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    category_id: Option<u64>,
    #[serde(default)]
    caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub manifest: PathBuf,
    pub written: usize,
    /// Images dropped because they had no caption.
    pub skipped_without_captions: usize,
    /// Category names in class-id order.
    pub class_names: Vec<String>,
}

/// Pads (repeating the last caption) or truncates to exactly five.
pub fn normalize_captions(mut caps: Vec<String>) -> Vec<String> {
    caps.truncate(CAPTIONS_PER_RECORD);
    while caps.len() < CAPTIONS_PER_RECORD {
        let last = caps.last().cloned().unwrap_or_default();
        caps.push(last);
    }
    caps
}

pub fn ingest_coco(annotation_file: &Path, image_dir: &Path, out_manifest: &Path) -> Result<IngestReport> {
    let text = fs::read_to_string(annotation_file).map_err(|e| Error::io(annotation_file, e))?;
    let coco: CocoFile = serde_json::from_str(&text)?;

    // contiguous class ids in category-list order
    let class_of: HashMap<u64, usize> = coco
        .categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id, i))
        .collect();

    let mut boxes: BTreeMap<u64, Vec<(BBox, usize)>> = BTreeMap::new();
    let mut captions: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    for ann in &coco.annotations {
        if let Some(c) = &ann.caption {
            captions.entry(ann.image_id).or_default().push(c.trim().to_string());
        }
        if let (Some([x, y, w, h]), Some(cat)) = (ann.bbox, ann.category_id) {
            let class = *class_of.get(&cat).ok_or_else(|| {
                Error::config(format!(
                    "annotation for image {} references unknown category id {cat}",
                    ann.image_id
                ))
            })?;
            if w > 0.0 && h > 0.0 {
                boxes
                    .entry(ann.image_id)
                    .or_default()
                    .push((BBox::from_xywh(x, y, w, h), class));
            }
        }
    }

    let image_root = std::path::absolute(image_dir).map_err(|e| Error::io(image_dir, e))?;
    let mut out = String::new();
    let mut written = 0;
    let mut skipped = 0;
    for img in &coco.images {
        let Some(caps) = captions.get(&img.id).filter(|c| !c.is_empty()) else {
            skipped += 1;
            continue;
        };
        let objs = boxes.get(&img.id).cloned().unwrap_or_default();
        let entry = ManifestEntry {
            id: img.id.to_string(),
            image: image_root.join(&img.file_name).display().to_string(),
            boxes: objs.iter().map(|(b, _)| *b).collect(),
            labels: objs.iter().map(|(_, c)| *c).collect(),
            captions: normalize_captions(caps.clone()),
        };
        out.push_str(&serde_json::to_string(&entry)?);
        out.push('\n');
        written += 1;
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} images without captions");
    }
    if let Some(parent) = out_manifest.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(out_manifest, out).map_err(|e| Error::io(out_manifest, e))?;
    Ok(IngestReport {
        manifest: out_manifest.to_path_buf(),
        written,
        skipped_without_captions: skipped,
        class_names: coco.categories.iter().map(|c| c.name.clone()).collect(),
    })
}
