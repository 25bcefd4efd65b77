//! Checkpoints: `manifest.json` (model spec, tensor index, prune events)
//! beside `tensors.bin`, a flat little-endian f64 archive.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DmpError, Result};
use crate::model::{Model, ModelSpec};
use crate::prune::Event;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const TENSORS: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the archive, in f64 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub spec: ModelSpec,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
    pub events: Vec<Event>,
}

/// Write `model` (parameters and batch-norm buffers) under `dir`.
pub fn save(dir: &Path, model: &Model, step: u64, events: &[Event]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push = |name: &str, shape: Vec<usize>, data: &[f64]| {
        let entry = TensorEntry {
            name: name.to_string(),
            shape,
            offset,
        };
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += data.len();
        entry
    };
    let tensors = model
        .params
        .iter()
        .map(|(_, p)| push(&p.name, p.value.shape().to_vec(), p.value.data()))
        .collect();
    let buffers = model
        .buffers()
        .iter()
        .map(|(name, data)| push(name, vec![data.len()], data))
        .collect();
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        spec: model.spec.clone(),
        step,
        tensors,
        buffers,
        events: events.to_vec(),
    };
    std::fs::write(dir.join(TENSORS), blob)?;
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> DmpError {
    DmpError::Checkpoint(msg.into())
}

/// Rebuild the model stored under `dir`.
pub fn load(dir: &Path) -> Result<(Model, Manifest)> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| corrupt(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(format!("malformed manifest: {e}")))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(corrupt(format!(
            "unsupported schema version {}",
            manifest.schema_version
        )));
    }
    let bytes = std::fs::read(dir.join(TENSORS))
        .map_err(|e| corrupt(format!("cannot read {}: {e}", dir.join(TENSORS).display())))?;
    if bytes.len() % 8 != 0 {
        return Err(corrupt(format!(
            "{TENSORS} length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let expected: usize = manifest
        .tensors
        .iter()
        .chain(&manifest.buffers)
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if expected != values.len() {
        return Err(corrupt(format!(
            "{TENSORS} holds {} values, manifest describes {expected}",
            values.len()
        )));
    }
    let slice = |e: &TensorEntry| -> Result<&[f64]> {
        let n: usize = e.shape.iter().product();
        values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| corrupt(format!("tensor `{}` runs past the archive", e.name)))
    };

    let mut model = Model::new(manifest.spec.clone())?;
    if manifest.tensors.len() != model.params.len() {
        return Err(corrupt(format!(
            "manifest lists {} tensors, the model has {}",
            manifest.tensors.len(),
            model.params.len()
        )));
    }
    for e in &manifest.tensors {
        let id = model
            .params
            .find(&e.name)
            .ok_or_else(|| corrupt(format!("unknown tensor `{}`", e.name)))?;
        let dst = model.params.get_mut(id);
        if dst.shape() != e.shape.as_slice() {
            return Err(corrupt(format!(
                "tensor `{}` has shape {:?}, model expects {:?}",
                e.name,
                e.shape,
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(slice(e)?);
    }
    for e in &manifest.buffers {
        model.set_buffer(&e.name, slice(e)?)?;
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_images;
    use crate::gate::Granularity;
    use crate::nn::GateSettings;
    use crate::train::{evaluate, train, TrainConfig};

    #[test]
    fn round_trip_reproduces_evaluation() {
        let spec = ModelSpec::toy_convnet(2, 6, &[4, 6], &[1, 2], 3).with_gates(GateSettings::new(Granularity::Filter));
        let mut model = Model::new(spec).unwrap();
        let data = synth_images(48, 3, 2, 6, 1.0, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &data, &data, &cfg, |_| Ok(())).unwrap();
        let before = evaluate(&mut model, &data, 16).unwrap();

        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model, out.steps, out.manager.events()).unwrap();
        let (mut back, manifest) = load(dir.path()).unwrap();
        assert_eq!(manifest.step, out.steps);
        assert_eq!(evaluate(&mut back, &data, 16).unwrap(), before);
    }

    #[test]
    fn corrupt_archive_is_rejected() {
        let model = Model::new(ModelSpec::mlp(3, &[4], 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model, 0, &[]).unwrap();
        let path = dir.path().join(TENSORS);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(DmpError::Checkpoint(_))));

        std::fs::write(dir.path().join(MANIFEST), "{ not json").unwrap();
        assert!(matches!(load(dir.path()), Err(DmpError::Checkpoint(_))));
    }
}
