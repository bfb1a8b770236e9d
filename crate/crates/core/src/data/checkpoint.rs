//! Checkpoint directory: `manifest.json` next to `params.bin`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::TimeMil;
use crate::tensor::Real;

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub byte_length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub config: RunConfig,
    pub input_channels: usize,
    pub num_classes: usize,
    pub class_labels: Vec<String>,
    pub params: Vec<ParamEntry>,
}

/// Writes the model with parameters rounded to 32-bit floats.
pub fn save_checkpoint<F: Real>(model: &TimeMil<F>, class_labels: &[String], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if class_labels.len() != model.num_classes {
        return Err(Error::usage(format!(
            "{} class labels for a {}-class model",
            class_labels.len(),
            model.num_classes
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.num_parameters() * 4);
    let mut params = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.iter() {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            byte_length: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        input_channels: model.input_channels,
        num_classes: model.num_classes,
        class_labels: class_labels.to_vec(),
        params,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    let mpath = dir.join(MANIFEST);
    std::fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB);
    std::fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

/// Loads a model and its class labels.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(TimeMil<f32>, Vec<String>)> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", mpath.display())))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Integrity(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    if manifest.class_labels.len() != manifest.num_classes {
        return Err(Error::Integrity("class label list does not match num_classes".into()));
    }
    let bpath = dir.join(BLOB);
    let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let declared: usize = manifest.params.iter().map(|p| p.byte_length).sum();
    if declared != blob.len() {
        return Err(Error::Integrity(format!(
            "{} holds {} bytes, manifest declares {declared}",
            bpath.display(),
            blob.len()
        )));
    }
    let mut model = TimeMil::<f32>::new(manifest.config.clone(), manifest.input_channels, manifest.num_classes)?;
    if model.params.len() != manifest.params.len() {
        return Err(Error::Integrity(format!(
            "manifest lists {} parameters, architecture has {}",
            manifest.params.len(),
            model.params.len()
        )));
    }
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    for ((entry, name), t) in manifest.params.iter().zip(&names).zip(model.params.tensors_mut()) {
        if &entry.name != name || entry.shape != t.shape() {
            return Err(Error::Integrity(format!(
                "parameter '{}' {:?} does not match architecture '{name}' {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let end = entry.offset.checked_add(entry.byte_length).filter(|&e| e <= blob.len());
        let Some(end) = end.filter(|_| entry.byte_length == t.len() * 4) else {
            return Err(Error::Integrity(format!("parameter '{}' has an invalid byte range", entry.name)));
        };
        for (dst, chunk) in t.data_mut().iter_mut().zip(blob[entry.offset..end].chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    Ok((model, manifest.class_labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            output_dim: 8,
            bottleneck_dim: 4,
            kernel_sizes: vec![3, 5, 9],
            d_model: 8,
            num_heads: 2,
            landmarks: 4,
            ..RunConfig::default()
        }
    }

    fn labels() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    #[test]
    fn round_trip_is_bitwise_and_idempotent() {
        let model = TimeMil::<f32>::new(tiny(), 2, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("c1");
        let p2 = dir.path().join("c2");
        save_checkpoint(&model, &labels(), &p1).unwrap();
        let (loaded, l) = load_checkpoint(&p1).unwrap();
        assert_eq!(l, labels());
        for (a, b) in model.params.tensors().iter().zip(loaded.params.tensors()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        save_checkpoint(&loaded, &l, &p2).unwrap();
        for f in [MANIFEST, BLOB] {
            assert_eq!(std::fs::read(p1.join(f)).unwrap(), std::fs::read(p2.join(f)).unwrap());
        }
    }

    #[test]
    fn truncated_blob_and_version_mismatch() {
        let model = TimeMil::<f32>::new(tiny(), 1, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, &labels(), dir.path()).unwrap();
        let blob = std::fs::read(dir.path().join(BLOB)).unwrap();
        std::fs::write(dir.path().join(BLOB), &blob[..blob.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Integrity(_))));
        std::fs::write(dir.path().join(BLOB), &blob).unwrap();
        let m = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        std::fs::write(dir.path().join(MANIFEST), m.replace("\"version\": 1", "\"version\": 99")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Integrity(_))));
    }
}
