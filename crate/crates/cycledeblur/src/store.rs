//! On-disk container for named tensors: a JSON manifest (array names, shapes,
//! element type, byte offsets, plus caller-provided metadata) followed by raw
//! little-endian payloads. Checkpoints and external feature-extractor weights
//! share this format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

const MAGIC: &[u8; 4] = b"CDTS";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("tensor store {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("tensor store {path}: not a tensor container (bad magic)")]
    BadMagic { path: String },
    #[error("tensor store {path}: unsupported version {found}")]
    BadVersion { path: String, found: u32 },
    #[error("tensor store {path}: malformed manifest: {reason}")]
    BadManifest { path: String, reason: String },
    #[error("tensor store {path}: element type is {found}, expected {expected}")]
    DtypeMismatch {
        path: String,
        found: String,
        expected: String,
    },
    #[error("tensor store {path}: payload for {name} is truncated")]
    Truncated { path: String, name: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `arrays` (in the given order) plus `meta` to `path`.
pub fn write_tensors<S: Real>(
    path: &Path,
    meta: &serde_json::Value,
    arrays: &[(String, ArrayViewD<'_, S>)],
) -> Result<(), StoreError> {
    let elem = std::mem::size_of::<S>() as u64;
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0u64;
    for (name, view) in arrays {
        let byte_len = view.len() as u64 * elem;
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: view.shape().to_vec(),
            dtype: S::DTYPE.to_string(),
            offset,
            byte_len,
        });
        offset += byte_len;
    }
    let manifest = Manifest {
        meta: meta.clone(),
        arrays: entries,
    };
    let header = serde_json::to_vec(&manifest).expect("manifest serializes");

    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
    emit(MAGIC)?;
    emit(&VERSION.to_le_bytes())?;
    emit(&(header.len() as u64).to_le_bytes())?;
    emit(&header)?;
    for (_, view) in arrays {
        // Row-major element order regardless of the view's memory layout.
        for v in view.iter() {
            w.write_all(&encode::<S>(*v)).map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Read every array (preserving file order) plus the stored metadata.
pub fn read_tensors<S: Real>(
    path: &Path,
) -> Result<(serde_json::Value, IndexMap<String, ArrayD<S>>), StoreError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(StoreError::BadMagic {
            path: path.display().to_string(),
        });
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4).map_err(|e| io_err(path, e))?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(StoreError::BadVersion {
            path: path.display().to_string(),
            found: version,
        });
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8).map_err(|e| io_err(path, e))?;
    let header_len = u64::from_le_bytes(l8) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(|e| io_err(path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&header).map_err(|e| StoreError::BadManifest {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;

    let elem = std::mem::size_of::<S>();
    let mut arrays = IndexMap::new();
    let mut cursor = 0u64;
    for entry in &manifest.arrays {
        if entry.dtype != S::DTYPE {
            return Err(StoreError::DtypeMismatch {
                path: path.display().to_string(),
                found: entry.dtype.clone(),
                expected: S::DTYPE.to_string(),
            });
        }
        if entry.offset != cursor {
            return Err(StoreError::BadManifest {
                path: path.display().to_string(),
                reason: format!("non-contiguous offset for {}", entry.name),
            });
        }
        let count: usize = entry.shape.iter().product();
        if count as u64 * elem as u64 != entry.byte_len {
            return Err(StoreError::BadManifest {
                path: path.display().to_string(),
                reason: format!("shape/byte length mismatch for {}", entry.name),
            });
        }
        let mut raw = vec![0u8; entry.byte_len as usize];
        r.read_exact(&mut raw).map_err(|_| StoreError::Truncated {
            path: path.display().to_string(),
            name: entry.name.clone(),
        })?;
        let mut data = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(elem) {
            data.push(decode::<S>(chunk));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data).map_err(|e| {
            StoreError::BadManifest {
                path: path.display().to_string(),
                reason: format!("bad shape for {}: {e}", entry.name),
            }
        })?;
        arrays.insert(entry.name.clone(), arr);
        cursor += entry.byte_len;
    }
    Ok((manifest.meta, arrays))
}

/// Peek the element-type tag without loading payloads.
pub fn read_dtype(path: &Path) -> Result<String, StoreError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(StoreError::BadMagic {
            path: path.display().to_string(),
        });
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4).map_err(|e| io_err(path, e))?;
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8).map_err(|e| io_err(path, e))?;
    let header_len = u64::from_le_bytes(l8) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(|e| io_err(path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&header).map_err(|e| StoreError::BadManifest {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    Ok(manifest
        .arrays
        .first()
        .map(|a| a.dtype.clone())
        .unwrap_or_else(|| "f64".to_string()))
}

fn encode<S: Real>(v: S) -> Vec<u8> {
    if S::DTYPE == "f32" {
        (v.as_f64() as f32).to_le_bytes().to_vec()
    } else {
        v.as_f64().to_le_bytes().to_vec()
    }
}

fn decode<S: Real>(bytes: &[u8]) -> S {
    if S::DTYPE == "f32" {
        S::of_f64(f64::from(f32::from_le_bytes(bytes.try_into().unwrap())))
    } else {
        S::of_f64(f64::from_le_bytes(bytes.try_into().unwrap()))
    }
}
