//! Tensor checkpoints: a UTF-8 JSON manifest listing parameter names,
//! shapes and byte offsets, plus one flat little-endian `f64` blob stored
//! beside it (same stem, `.bin` extension). Both files are written to a
//! temporary name and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "agct-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Number of `f64` values.
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub byte_order: String,
    pub dtype: String,
    pub blob: String,
    pub entries: Vec<CheckpointEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> TensorError {
    TensorError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TensorError + '_ {
    move |source| TensorError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `bytes` to `path` atomically (temp file + rename).
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_checkpoint(manifest_path: &Path, tensors: &[(String, &Tensor)], metadata: serde_json::Value) -> Result<()> {
    let blob = blob_path(manifest_path);
    let mut bytes = Vec::with_capacity(tensors.iter().map(|(_, t)| t.len() * 8).sum());
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(CheckpointEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
            len: t.len() as u64,
        });
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        byte_order: "LE".to_string(),
        dtype: "f64".to_string(),
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        entries,
        metadata,
    };
    write_atomic(&blob, &bytes)?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| ckpt_err(manifest_path, e.to_string()))?;
    write_atomic(manifest_path, &json)
}

pub fn read_checkpoint(manifest_path: &Path) -> Result<(CheckpointManifest, Vec<(String, Tensor)>)> {
    let text = fs::read(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&text).map_err(|e| ckpt_err(manifest_path, format!("corrupt manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.byte_order != "LE" || manifest.dtype != "f64" {
        return Err(ckpt_err(manifest_path, "unsupported format, byte order or dtype"));
    }
    let blob = manifest_path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(io_err(&blob))?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let start = e.offset as usize;
        let end = start + 8 * e.len as usize;
        if end > bytes.len() {
            return Err(ckpt_err(&blob, format!("truncated blob while reading {}", e.name)));
        }
        let data = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| ckpt_err(manifest_path, err.to_string()))?;
        out.push((e.name.clone(), t));
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        let a = Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let b = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        write_checkpoint(&p, &[("a".into(), &a), ("b".into(), &b)], serde_json::json!({"epoch": 3})).unwrap();
        let (m, ts) = read_checkpoint(&p).unwrap();
        assert_eq!(m.metadata["epoch"], 3);
        assert_eq!(ts[0].1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(ts[1].1, b);
        assert_eq!(m.entries[1].offset, 32);
    }

    #[test]
    fn truncated_blob_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        let a = Tensor::full(&[4], 1.0);
        write_checkpoint(&p, &[("a".into(), &a)], serde_json::Value::Null).unwrap();
        let blob = blob_path(&p);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..20]).unwrap();
        let err = read_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn blob_is_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        write_checkpoint(&p, &[("a".into(), &Tensor::scalar(1.0))], serde_json::Value::Null).unwrap();
        let bytes = fs::read(blob_path(&p)).unwrap();
        assert_eq!(bytes, vec![0, 0, 0, 0, 0, 0, 0xf0, 0x3f]);
    }
}
