//! JSON Lines manifests with PPM images stored next to them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ImageTensor, SceneRecord};
use crate::detect::boxes::BBox;
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Path relative to the manifest's directory (absolute paths are kept).
    pub image: String,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
    pub captions: Vec<String>,
}

impl ManifestEntry {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.captions.len() != super::CAPTIONS_PER_RECORD {
            return Err(format!(
                "record {}: expected {} captions, found {}",
                self.id,
                super::CAPTIONS_PER_RECORD,
                self.captions.len()
            ));
        }
        if self.boxes.len() != self.labels.len() {
            return Err(format!(
                "record {}: {} boxes but {} labels",
                self.id,
                self.boxes.len(),
                self.labels.len()
            ));
        }
        if let Some(b) = self.boxes.iter().find(|b| !b.is_valid()) {
            return Err(format!("record {}: invalid box {:?}", self.id, b));
        }
        Ok(())
    }
}

/// Writes `records` as `dir/images/<id>.ppm` plus `dir/manifest.jsonl`.
/// Returns the manifest path.
pub fn write_dataset(records: &[SceneRecord], dir: &Path) -> Result<PathBuf> {
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let manifest = dir.join(MANIFEST_NAME);
    let mut out = Vec::new();
    for rec in records {
        rec.validate()?;
        let rel = format!("{IMAGE_DIR}/{}.ppm", rec.id);
        rec.image.write_ppm(&dir.join(&rel))?;
        let entry = ManifestEntry {
            id: rec.id.clone(),
            image: rel,
            boxes: rec.boxes.clone(),
            labels: rec.labels.clone(),
            captions: rec.captions.clone(),
        };
        serde_json::to_writer(&mut out, &entry)?;
        out.push(b'\n');
    }
    let tmp = manifest.with_extension("jsonl.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, &manifest).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Parses and validates manifest lines without touching image files.
pub fn read_manifest(manifest: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Manifest {
            path: manifest.to_path_buf(),
            line: i + 1,
            reason,
        };
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        entry.validate().map_err(err)?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn resolve_image_path(manifest: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub fn load_entry(manifest: &Path, entry: &ManifestEntry) -> Result<SceneRecord> {
    let path = resolve_image_path(manifest, &entry.image);
    if !path.exists() {
        return Err(Error::MissingImage {
            id: entry.id.clone(),
            path,
        });
    }
    let image = ImageTensor::read_ppm(&path)?;
    Ok(SceneRecord {
        id: entry.id.clone(),
        image,
        boxes: entry.boxes.clone(),
        labels: entry.labels.clone(),
        captions: entry.captions.clone(),
    })
}

/// Loads every record of a manifest, images included.
pub fn read_dataset(manifest: &Path) -> Result<Vec<SceneRecord>> {
    read_manifest(manifest)?
        .iter()
        .map(|e| load_entry(manifest, e))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_dataset, SceneConfig};

    #[test]
    fn round_trip_ten_records() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            image_size: 64,
            ..Default::default()
        };
        let recs = generate_dataset(100, 10, &cfg).unwrap();
        let manifest = write_dataset(&recs, dir.path()).unwrap();
        assert_eq!(read_dataset(&manifest).unwrap(), recs);
    }

    #[test]
    fn four_captions_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_NAME);
        fs::write(
            &p,
            r#"{"id":"x","image":"images/x.ppm","boxes":[],"labels":[],"captions":["a","b","c","d"]}"#,
        )
        .unwrap();
        let err = read_manifest(&p).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 1, .. }), "{err}");
        assert!(err.to_string().contains("expected 5 captions"));
    }

    #[test]
    fn missing_image_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let recs = generate_dataset(0, 2, &SceneConfig { image_size: 32, ..Default::default() }).unwrap();
        let manifest = write_dataset(&recs, dir.path()).unwrap();
        fs::remove_file(dir.path().join(IMAGE_DIR).join(format!("{}.ppm", recs[1].id))).unwrap();
        match read_dataset(&manifest) {
            Err(Error::MissingImage { id, .. }) => assert_eq!(id, recs[1].id),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_image_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let recs = generate_dataset(0, 1, &SceneConfig { image_size: 32, ..Default::default() }).unwrap();
        let manifest = write_dataset(&recs, dir.path()).unwrap();
        let img = dir.path().join(IMAGE_DIR).join(format!("{}.ppm", recs[0].id));
        fs::write(&img, b"GIF89a garbage").unwrap();
        let err = read_dataset(&manifest).unwrap_err();
        assert!(err.to_string().contains(&img.display().to_string()), "{err}");
    }
}
