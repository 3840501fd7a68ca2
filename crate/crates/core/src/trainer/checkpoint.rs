//! Single-file checkpoint container.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, then the
//! little-endian f32 payload. The header maps every tensor name to its dtype,
//! shape and byte offset into the payload, and carries the step counter and
//! the configuration needed to rebuild the model. Optimizer moments are
//! stored as ordinary tensors under `optim.m.` / `optim.v.`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{JointModel, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub step: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Caption vocabulary, one token per id.
    pub vocab: Vec<String>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// A decoded checkpoint: header plus f32 tensors by name.
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

fn flat_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

/// Writes model parameters and optimizer state atomically
/// (temporary file in the same directory, then rename).
pub fn save(
    path: &Path,
    model: &JointModel,
    opt: &AdamW,
    train: &TrainConfig,
    vocab: &[String],
) -> Result<()> {
    let mut named: Vec<(String, &Tensor)> = model
        .params()
        .iter()
        .map(|(n, v)| (n.to_string(), v.as_tensor()))
        .collect();
    named.extend(opt.m.iter().map(|(n, t)| (format!("optim.m.{n}"), t)));
    named.extend(opt.v.iter().map(|(n, t)| (format!("optim.v.{n}"), t)));

    let mut tensors = BTreeMap::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in &named {
        tensors.insert(
            name.clone(),
            TensorEntry {
                dtype: "f32".into(),
                shape: t.dims().to_vec(),
                offset: payload.len(),
            },
        );
        for x in flat_f32(t)? {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        step: opt.step,
        model: model.config().clone(),
        train: train.clone(),
        vocab: vocab.to_vec(),
        tensors,
    };
    let head = serde_json::to_vec(&header)?;

    let tmp = path.with_extension("bin.tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&(head.len() as u64).to_le_bytes())?;
        f.write_all(&head)?;
        f.write_all(&payload)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Checkpoint(format!("{}: {why}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("file shorter than its length prefix"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + n).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let payload = &bytes[8 + n..];
    let mut tensors = BTreeMap::new();
    for (name, e) in &header.tensors {
        if e.dtype != "f32" {
            return Err(bad(&format!("tensor {name} has unsupported dtype {}", e.dtype)));
        }
        let count: usize = e.shape.iter().product();
        let raw = payload
            .get(e.offset..e.offset + 4 * count)
            .ok_or_else(|| bad(&format!("tensor {name} runs past the payload")))?;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(name.clone(), Tensor::from_vec(vals, e.shape.as_slice(), &Device::Cpu)?);
    }
    Ok(Checkpoint { header, tensors })
}

impl Checkpoint {
    /// Copies parameters into `model`; every model parameter must be present.
    pub fn restore_model(&self, model: &JointModel) -> Result<()> {
        for name in model.params().names() {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            model.params().set(name, t)?;
        }
        Ok(())
    }

    /// Optimizer state in the model's dtype.
    pub fn restore_optimizer(&self, opt: &mut AdamW, dtype: DType) -> Result<()> {
        opt.step = self.header.step;
        opt.m.clear();
        opt.v.clear();
        for (name, t) in &self.tensors {
            if let Some(p) = name.strip_prefix("optim.m.") {
                opt.m.insert(p.to_string(), t.to_dtype(dtype)?);
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                opt.v.insert(p.to_string(), t.to_dtype(dtype)?);
            }
        }
        Ok(())
    }

    /// Builds a fresh model from the stored configuration and loads it.
    pub fn build_model(&self, dtype: DType) -> Result<JointModel> {
        let model = JointModel::new(&self.header.model, self.header.train.seed, dtype)?;
        self.restore_model(&model)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Partition;

    #[test]
    fn round_trip_restores_parameters_and_moments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        let cfg = ModelConfig::micro(2, 8);
        let a = JointModel::new(&cfg, 5, DType::F32).unwrap();
        let mut opt = AdamW::new(Default::default());
        opt.step = 7;
        let (name, var) = a.params().iter().next().unwrap();
        opt.m.insert(name.to_string(), (var.as_tensor() * 2.0).unwrap());
        let vocab: Vec<String> = (0..8).map(|i| format!("w{i}")).collect();
        save(&path, &a, &opt, &TrainConfig::default(), &vocab).unwrap();
        assert!(!path.with_extension("bin.tmp").exists());

        let ck = load(&path).unwrap();
        assert_eq!(ck.header.step, 7);
        assert_eq!(ck.header.vocab, vocab);
        let b = ck.build_model(DType::F32).unwrap();
        for p in Partition::ALL {
            assert_eq!(a.params().snapshot(p).unwrap(), b.params().snapshot(p).unwrap());
        }
        let mut opt2 = AdamW::new(Default::default());
        ck.restore_optimizer(&mut opt2, DType::F32).unwrap();
        assert_eq!(opt2.step, 7);
        assert_eq!(
            flat_f32(&opt2.m[name]).unwrap(),
            flat_f32(&opt.m[name]).unwrap()
        );
    }

    #[test]
    fn header_offsets_are_contiguous() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let m = JointModel::new(&ModelConfig::micro(2, 8), 0, DType::F32).unwrap();
        save(&path, &m, &AdamW::new(Default::default()), &TrainConfig::default(), &[]).unwrap();
        let ck = load(&path).unwrap();
        let mut entries: Vec<&TensorEntry> = ck.header.tensors.values().collect();
        entries.sort_by_key(|e| e.offset);
        let mut next = 0;
        for e in entries {
            assert_eq!(e.offset, next);
            next += 4 * e.shape.iter().product::<usize>();
        }
        let len = std::fs::metadata(&path).unwrap().len() as usize;
        let head = u64::from_le_bytes(std::fs::read(&path).unwrap()[..8].try_into().unwrap()) as usize;
        assert_eq!(len, 8 + head + next);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        std::fs::write(&path, [1u8, 0, 0]).unwrap();
        assert!(load(&path).is_err());
    }
}
