//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header
//! (configuration, architecture hash, tensor directory), then every tensor
//! as little-endian `f64` in directory order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{DitModel, DitParams};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PROCDIT\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    architecture_hash: String,
    config: ModelConfig,
    /// Training steps taken before the save.
    steps_trained: usize,
    tensors: Vec<TensorEntry>,
}

/// A model plus bookkeeping read from disk.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DitModel,
    pub steps_trained: usize,
}

pub fn save_checkpoint(path: &Path, model: &DitModel, steps_trained: usize) -> Result<()> {
    let entries = model.params.entries();
    let header = Header {
        version: CHECKPOINT_VERSION,
        architecture_hash: model.config.architecture_hash(),
        config: model.config.clone(),
        steps_trained,
        tensors: entries
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let total: usize = entries.iter().map(|(_, t)| t.numel()).sum();
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * total);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &entries {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint("file is truncated".into()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

/// Reads a checkpoint and checks its stored configuration against its hash.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = fs::read(path)?;
    let mut rest = data.as_slice();
    if take(&mut rest, 8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(take(&mut rest, 8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(take(&mut rest, len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let actual = header.config.architecture_hash();
    if actual != header.architecture_hash {
        return Err(Error::Checkpoint(format!(
            "configuration hash mismatch: header says {}, configuration hashes to {actual}",
            header.architecture_hash
        )));
    }

    let mut params = DitParams::zeros(&header.config);
    let mut slots = params.entries_mut();
    if slots.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, configuration needs {}",
            header.tensors.len(),
            slots.len()
        )));
    }
    for ((name, slot), entry) in slots.iter_mut().zip(&header.tensors) {
        if *name != entry.name || slot.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match {name} {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let n = slot.numel();
        let raw = take(&mut rest, 8 * n)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        **slot = Tensor::new(entry.shape.clone(), values)?;
    }
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    drop(slots);
    Ok(Checkpoint {
        model: DitModel::new(header.config, params)?,
        steps_trained: header.steps_trained,
    })
}

/// Loads a checkpoint and requires it to match `expected`'s architecture.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let want = expected.architecture_hash();
    let got = ckpt.model.config.architecture_hash();
    if want != got {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture {got} does not match configuration {want}"
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = DitModel::random(ModelConfig::tiny()).unwrap();
        save_checkpoint(&path, &model, 17).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.steps_trained, 17);
        assert_eq!(back.model.config, model.config);
        for ((_, a), (_, b)) in model.params.entries().iter().zip(back.model.params.entries()) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn tampered_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &DitModel::random(ModelConfig::tiny()).unwrap(), 0).unwrap();
        let bytes = fs::read(&path).unwrap();
        let needle = b"\"depth\":2";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        let mut bad = bytes.clone();
        bad[at + 8] = b'3';
        fs::write(&path, bad).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("hash mismatch"), "{err}");
    }

    #[test]
    fn architecture_mismatch_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &DitModel::random(ModelConfig::tiny()).unwrap(), 0).unwrap();
        assert!(load_checkpoint_for(&path, &ModelConfig::default()).is_err());
        let mut sampling_only = ModelConfig::tiny();
        sampling_only.alpha = 0.5;
        assert!(load_checkpoint_for(&path, &sampling_only).is_ok());
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
