//! `.vol` raw little-endian f32 data with a JSON sidecar header.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: String,
    pub order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

/// The `.json` header that accompanies a `.vol` file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = VolumeHeader {
        shape: vol.shape(),
        spacing_mm: vol.spacing_mm(),
        dtype: "f32le".into(),
        order: "zyx".into(),
        subject: (!vol.subject().is_empty()).then(|| vol.subject().to_string()),
    };
    let mut raw = Vec::with_capacity(vol.data().len() * 4);
    for v in vol.data() {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, raw).map_err(|e| Error::io(path, e))?;
    let sidecar = sidecar_path(path);
    let mut json = serde_json::to_string_pretty(&header)?;
    json.push('\n');
    fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let sidecar = sidecar_path(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::Header {
        path: sidecar.clone(),
        detail: e.to_string(),
    })?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: sidecar.clone(),
        detail: e.to_string(),
    })?;
    if header.dtype != "f32le" || header.order != "zyx" {
        return Err(Error::Header {
            path: sidecar,
            detail: format!("unsupported dtype/order {}/{}", header.dtype, header.order),
        });
    }
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = header.shape.iter().product::<usize>() as u64 * 4;
    if raw.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found: raw.len() as u64,
        });
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let subject = header.subject.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    Volume::new(header.shape, header.spacing_mm, data, subject)
}
