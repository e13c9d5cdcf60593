//! Self-describing tensor file.
//!
//! Layout: 8-byte magic `SPDTCKPT`, little-endian `u64` header length, a
//! UTF-8 JSON header, then the payload. Entry offsets are relative to the
//! start of the payload and every value is little-endian.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SPDTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub endianness: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub entries: Vec<ManifestEntry>,
}

/// A decoded file: the manifest and tensors in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }
}

fn entry_err(entry: &str, reason: impl Into<String>) -> Error {
    Error::CheckpointEntry {
        entry: entry.to_string(),
        reason: reason.into(),
    }
}

/// Serializes tensors as f64 in the given order.
pub fn encode(metadata: serde_json::Value, tensors: &[(String, ArrayViewD<'_, f64>)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut seen = BTreeSet::new();
    let mut offset = 0u64;
    for (name, a) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(entry_err(name, "duplicate tensor name"));
        }
        if let Some(bad) = a.iter().find(|v| !v.is_finite()) {
            return Err(entry_err(name, format!("non-finite value {bad}")));
        }
        let nbytes = (a.len() * Dtype::F64.size()) as u64;
        entries.push(ManifestEntry {
            name: name.clone(),
            dtype: Dtype::F64,
            shape: a.shape().to_vec(),
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        endianness: "little".into(),
        metadata,
        entries,
    };
    let header = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, a) in tensors {
        // Logical (row-major) order regardless of memory layout.
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<TensorFile> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint(format!("header length {hlen} exceeds file size {}", bytes.len())))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[16..header_end])?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format_version {}", manifest.format_version)));
    }
    if manifest.endianness != "little" {
        return Err(Error::Checkpoint(format!("unsupported endianness {:?}", manifest.endianness)));
    }
    let payload = &bytes[header_end..];
    validate_entries(&manifest.entries, payload.len() as u64)?;
    let mut tensors = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
        let values: Vec<f64> = match e.dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        let a = ArrayD::from_shape_vec(IxDyn(&e.shape), values).map_err(|err| entry_err(&e.name, err.to_string()))?;
        tensors.push((e.name.clone(), a));
    }
    Ok(TensorFile { manifest, tensors })
}

fn validate_entries(entries: &[ManifestEntry], payload_len: u64) -> Result<()> {
    let mut names = BTreeSet::new();
    let mut prev_end = 0u64;
    for e in entries {
        if !names.insert(e.name.as_str()) {
            return Err(entry_err(&e.name, "duplicate tensor name"));
        }
        let count = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| entry_err(&e.name, "shape overflows"))?;
        let want = count * e.dtype.size() as u64;
        if e.nbytes != want {
            return Err(entry_err(
                &e.name,
                format!("nbytes {} does not match shape {:?} ({} bytes)", e.nbytes, e.shape, want),
            ));
        }
        if e.offset < prev_end {
            return Err(entry_err(
                &e.name,
                format!("offset {} overlaps or precedes the previous entry ending at {prev_end}", e.offset),
            ));
        }
        let end = e.offset + e.nbytes;
        if end > payload_len {
            return Err(entry_err(&e.name, format!("range {}..{end} exceeds payload of {payload_len} bytes", e.offset)));
        }
        prev_end = end;
    }
    Ok(())
}

pub fn write_checkpoint(
    path: &Path,
    metadata: serde_json::Value,
    tensors: &[(String, ArrayViewD<'_, f64>)],
) -> Result<CheckpointManifest> {
    let bytes = encode(metadata, tensors)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    decode_manifest(&bytes)
}

pub fn read_checkpoint(path: &Path) -> Result<TensorFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn decode_manifest(bytes: &[u8]) -> Result<CheckpointManifest> {
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    Ok(serde_json::from_slice(&bytes[16..16 + hlen])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> Vec<(String, ArrayD<f64>)> {
        vec![
            ("a.weight".into(), array![[1.0, 2.0], [3.0, -4.5]].into_dyn()),
            ("a.bias".into(), array![0.25, -0.0].into_dyn()),
        ]
    }

    fn views(t: &[(String, ArrayD<f64>)]) -> Vec<(String, ArrayViewD<'_, f64>)> {
        t.iter().map(|(n, a)| (n.clone(), a.view())).collect()
    }

    fn assemble(m: &CheckpointManifest, payload: &[u8]) -> Vec<u8> {
        let header = serde_json::to_vec(m).unwrap();
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&(header.len() as u64).to_le_bytes());
        b.extend_from_slice(&header);
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn round_trip_is_exact() {
        let t = sample();
        let bytes = encode(serde_json::json!({"k": 1}), &views(&t)).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.tensors, t);
        assert_eq!(back.manifest.entries[1].offset, 32);
        assert_eq!(encode(serde_json::json!({"k": 1}), &views(&back.tensors)).unwrap(), bytes);
    }

    #[test]
    fn corrupted_entry_is_named() {
        let t = sample();
        let bytes = encode(serde_json::Value::Null, &views(&t)).unwrap();
        let mut m = decode_manifest(&bytes).unwrap();
        let payload_start = bytes.len() - 48;
        m.entries[1].nbytes = 8;
        let bad = assemble(&m, &bytes[payload_start..]);
        match decode(&bad) {
            Err(Error::CheckpointEntry { entry, .. }) => assert_eq!(entry, "a.bias"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reads_f32_entries() {
        let m = CheckpointManifest {
            format_version: FORMAT_VERSION,
            endianness: "little".into(),
            metadata: serde_json::Value::Null,
            entries: vec![ManifestEntry {
                name: "x".into(),
                dtype: Dtype::F32,
                shape: vec![2],
                offset: 0,
                nbytes: 8,
            }],
        };
        let mut payload = Vec::new();
        payload.extend_from_slice(&1.5f32.to_le_bytes());
        payload.extend_from_slice(&(-2.0f32).to_le_bytes());
        let b = assemble(&m, &payload);
        let f = decode(&b).unwrap();
        assert_eq!(f.get("x").unwrap().as_slice().unwrap(), &[1.5, -2.0]);
    }

    #[test]
    fn rejects_bad_magic_and_duplicates() {
        assert!(matches!(decode(b"NOTACKPT\0\0\0\0\0\0\0\0"), Err(Error::Checkpoint(_))));
        let a = array![1.0].into_dyn();
        let dup = vec![("x".to_string(), a.view()), ("x".to_string(), a.view())];
        assert!(matches!(encode(serde_json::Value::Null, &dup), Err(Error::CheckpointEntry { .. })));
    }
}
