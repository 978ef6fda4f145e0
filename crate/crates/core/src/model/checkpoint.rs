//! Binary checkpoint: `BRNC`, a little-endian u32 version, a u64 metadata
//! length, JSON metadata, then every parameter as little-endian f32 in table
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

use super::{EpochRecord, Model, ModelConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BRNC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// In f32 elements from the start of the blob.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    config: ModelConfig,
    epoch: usize,
    history: Vec<EpochRecord>,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut params = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for (name, t) in model.named_params() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for v in t.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let meta = Metadata {
        config: model.config().clone(),
        epoch: model.epochs_trained(),
        history: model.history().to_vec(),
        params,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() < 16 || raw[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let meta_len = u64::from_le_bytes(raw[8..16].try_into().expect("8 bytes"));
    let meta_end = usize::try_from(meta_len)
        .ok()
        .and_then(|n| n.checked_add(16))
        .filter(|&end| end <= raw.len())
        .ok_or_else(|| bad("metadata length exceeds file size"))?;
    let meta: Metadata = serde_json::from_slice(&raw[16..meta_end]).map_err(|e| bad(format!("metadata: {e}")))?;
    let blob = &raw[meta_end..];

    let mut model = Model::<f32>::new(meta.config)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_params()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    if expected.len() != meta.params.len() {
        return Err(bad(format!(
            "table lists {} parameters, configuration implies {}",
            meta.params.len(),
            expected.len()
        )));
    }
    let mut offset = 0;
    for (entry, (name, shape)) in meta.params.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape || entry.offset != offset {
            return Err(bad(format!(
                "table entry {} {:?} at {} does not match {} {:?} at {}",
                entry.name, entry.shape, entry.offset, name, shape, offset
            )));
        }
        let n: usize = shape.iter().product();
        offset += n;
    }
    if blob.len() != offset * 4 {
        return Err(bad(format!(
            "parameter blob holds {} bytes, table needs {}",
            blob.len(),
            offset * 4
        )));
    }
    let mut values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut fill = |t: &mut Tensor<f32>| {
        for v in t.data_mut() {
            *v = values.next().expect("length checked");
        }
    };
    model
        .flow_mut()
        .params_mut()
        .tensors_mut()
        .iter_mut()
        .for_each(&mut fill);
    model
        .process_mut()
        .params_mut()
        .tensors_mut()
        .iter_mut()
        .for_each(&mut fill);
    if meta.epoch != meta.history.len() {
        return Err(bad("epoch count disagrees with the loss history"));
    }
    model.history = meta.history;
    Ok(model)
}

/// Loads a checkpoint that must share `expected`'s architecture.
pub fn load_checkpoint_matching(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Model<f32>> {
    let model = load_checkpoint(path)?;
    if !model.config().same_architecture(expected) {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has flow {:?} / process {:?}, expected flow {:?} / process {:?}",
            model.config().flow,
            model.config().process,
            expected.flow,
            expected.process
        )));
    }
    Ok(model)
}
