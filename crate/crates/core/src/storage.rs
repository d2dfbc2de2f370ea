//! Array files: a UTF-8 JSON header next to a raw little-endian blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::fsutil::write_atomic;

pub const ARRAY_FORMAT: &str = "agct-array/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Volume,
    Mask,
    Projection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Hu,
    Normalized,
    Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub format: String,
    pub shape: Vec<usize>,
    pub pitch_mm: f64,
    pub dtype: Dtype,
    pub byte_order: String,
    pub role: Role,
    pub units: Units,
    /// Hex SHA-256 of the blob.
    pub checksum: String,
    /// Blob file name, relative to the header.
    pub blob: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F64(_) => Dtype::F64,
            ArrayData::U8(_) => Dtype::U8,
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U8(v) => v.clone(),
        }
    }
}

fn blob_name(path: &Path) -> String {
    path.with_extension("bin")
        .file_name()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned()
}

/// Writes `data` with the given metadata to `path` (header) and a sibling
/// `.bin` blob.
pub fn write_array(path: &Path, shape: &[usize], pitch_mm: f64, role: Role, units: Units, data: &ArrayData) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::shape(format!("write {}", path.display()), &[n], &[data.len()]));
    }
    let bytes = data.to_le_bytes();
    let header = ArrayHeader {
        format: ARRAY_FORMAT.into(),
        shape: shape.to_vec(),
        pitch_mm,
        dtype: data.dtype(),
        byte_order: "LE".into(),
        role,
        units,
        checksum: hex::encode(Sha256::digest(&bytes)),
        blob: blob_name(path),
    };
    write_atomic(&path.with_file_name(&header.blob), &bytes)?;
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");
    write_atomic(path, &json)
}

pub fn read_header(path: &Path) -> Result<ArrayHeader> {
    let text = fs::read(path).map_err(io_err(path))?;
    let corrupt = |reason: String| Error::CorruptHeader {
        path: path.to_path_buf(),
        reason,
    };
    let header: ArrayHeader = serde_json::from_slice(&text).map_err(|e| corrupt(e.to_string()))?;
    if header.format != ARRAY_FORMAT {
        return Err(corrupt(format!("unknown format {:?}", header.format)));
    }
    if header.byte_order != "LE" {
        return Err(corrupt(format!("unsupported byte order {:?}", header.byte_order)));
    }
    if header.shape.is_empty() || header.shape.contains(&0) {
        return Err(corrupt(format!("invalid shape {:?}", header.shape)));
    }
    Ok(header)
}

pub fn read_array(path: &Path) -> Result<(ArrayHeader, ArrayData)> {
    let header = read_header(path)?;
    let blob = path.with_file_name(&header.blob);
    let bytes = fs::read(&blob).map_err(io_err(&blob))?;
    let n: usize = header.shape.iter().product();
    let expected = n * header.dtype.size();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: blob,
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    if bytes.len() > expected {
        return Err(Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: format!("blob holds {} bytes, shape {:?} needs {expected}", bytes.len(), header.shape),
        });
    }
    let checksum = hex::encode(Sha256::digest(&bytes));
    if checksum != header.checksum {
        return Err(Error::FingerprintMismatch {
            path: blob,
            expected: header.checksum,
            found: checksum,
        });
    }
    let data = match header.dtype {
        Dtype::F64 => ArrayData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        Dtype::U8 => ArrayData::U8(bytes),
    };
    Ok((header, data))
}

/// Reads an `f64` array with the expected role.
pub fn read_f64(path: &Path, role: Role) -> Result<(ArrayHeader, Vec<f64>)> {
    match read_array(path)? {
        (h, ArrayData::F64(v)) if h.role == role => Ok((h, v)),
        (h, _) => Err(Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: format!("expected a {role:?} array of f64, found {:?} {:?}", h.role, h.dtype),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_byte_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        let data = ArrayData::F64(vec![1.0, -2.5, 3.25]);
        write_array(&p, &[3], 2.5, Role::Projection, Units::Normalized, &data).unwrap();
        let raw = fs::read(dir.path().join("a.bin")).unwrap();
        assert_eq!(&raw[..8], &1.0f64.to_le_bytes());
        let (h, back) = read_array(&p).unwrap();
        assert_eq!(back, data);
        assert_eq!(h.byte_order, "LE");
    }

    #[test]
    fn distinct_failure_modes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        write_array(&p, &[4], 1.0, Role::Mask, Units::Label, &ArrayData::U8(vec![0, 1, 2, 3])).unwrap();
        let blob = dir.path().join("m.bin");

        fs::write(&blob, [0u8, 1, 2, 4]).unwrap();
        assert!(matches!(read_array(&p), Err(Error::FingerprintMismatch { .. })));
        fs::write(&blob, [0u8, 1]).unwrap();
        assert!(matches!(read_array(&p), Err(Error::Truncated { .. })));
        fs::write(&p, b"{not json").unwrap();
        assert!(matches!(read_array(&p), Err(Error::CorruptHeader { .. })));
    }
}
