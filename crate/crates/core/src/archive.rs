//! Flat little-endian tensor archives.
//!
//! An archive is a directory holding `tensors.bin`, the concatenated raw
//! tensors in name order, and `index.json`, which maps each name to its
//! shape and byte offset and records the byte length and SHA-256 of the
//! binary blob. Checkpoints add a `config.json` alongside; latent files are
//! archives with the single tensor `latent`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Result, RiddleError};
use crate::latent::{ChunkLayout, LatentCode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT: &str = "riddle-tensors";
pub const VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";
pub const DATA_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveIndex {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub byte_len: usize,
    pub sha256: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, Value>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive<T> {
    pub metadata: BTreeMap<String, Value>,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> TensorArchive<T> {
    pub fn new() -> Self {
        TensorArchive {
            metadata: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    /// Serialized `(index.json, tensors.bin)` contents.
    pub fn encode(&self) -> (Vec<u8>, Vec<u8>) {
        let mut blob = Vec::new();
        let mut entries = BTreeMap::new();
        for (name, t) in &self.tensors {
            entries.insert(
                name.clone(),
                TensorEntry {
                    shape: [t.rows(), t.cols()],
                    offset: blob.len(),
                },
            );
            for &v in t.data() {
                v.write_le(&mut blob);
            }
        }
        let index = ArchiveIndex {
            format: FORMAT.to_string(),
            version: VERSION,
            dtype: T::DTYPE.to_string(),
            byte_len: blob.len(),
            sha256: hex::encode(Sha256::digest(&blob)),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let mut text = serde_json::to_string_pretty(&index).expect("index serializes");
        text.push('\n');
        (text.into_bytes(), blob)
    }

    pub fn decode(index_bytes: &[u8], blob: &[u8]) -> Result<Self> {
        let index: ArchiveIndex = serde_json::from_slice(index_bytes)
            .map_err(|e| RiddleError::Integrity(format!("unreadable index: {e}")))?;
        if index.format != FORMAT {
            return Err(RiddleError::Integrity(format!("unknown format `{}`", index.format)));
        }
        if index.version != VERSION {
            return Err(RiddleError::Integrity(format!(
                "unsupported archive version {} (expected {VERSION})",
                index.version
            )));
        }
        if index.dtype != T::DTYPE {
            return Err(RiddleError::Integrity(format!(
                "archive holds {} but {} was requested",
                index.dtype,
                T::DTYPE
            )));
        }
        if blob.len() != index.byte_len {
            return Err(RiddleError::Integrity(format!(
                "tensor data is {} bytes, index declares {}",
                blob.len(),
                index.byte_len
            )));
        }
        if hex::encode(Sha256::digest(blob)) != index.sha256 {
            return Err(RiddleError::Integrity("tensor data checksum mismatch".into()));
        }
        let mut tensors = BTreeMap::new();
        for (name, entry) in index.tensors {
            let [rows, cols] = entry.shape;
            let end = entry
                .offset
                .checked_add(rows * cols * T::WIDTH)
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| RiddleError::Integrity(format!("tensor `{name}` runs past end of data")))?;
            let data = blob[entry.offset..end]
                .chunks_exact(T::WIDTH)
                .map(T::read_le)
                .collect();
            tensors.insert(name, Tensor::from_vec(rows, cols, data)?);
        }
        Ok(TensorArchive {
            metadata: index.metadata,
            tensors,
        })
    }

    pub fn write_dir(&self, dir: &Path, extra: &[(&str, Vec<u8>)]) -> Result<()> {
        let (index, blob) = self.encode();
        let mut files: Vec<(&str, Vec<u8>)> = vec![(INDEX_FILE, index), (DATA_FILE, blob)];
        files.extend(extra.iter().cloned());
        write_dir_atomic(dir, &files)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let index = read_file(&dir.join(INDEX_FILE))?;
        let blob = read_file(&dir.join(DATA_FILE))?;
        Self::decode(&index, &blob)
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor<T>> {
        self.tensors
            .remove(name)
            .ok_or_else(|| RiddleError::Integrity(format!("archive has no tensor `{name}`")))
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| RiddleError::io(path, e))
}

fn sibling(path: &Path, tag: &str) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    path.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

/// Writes a file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| RiddleError::io(parent, e))?;
    }
    let tmp = sibling(path, "tmp");
    fs::write(&tmp, bytes).map_err(|e| RiddleError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| RiddleError::io(path, e))
}

/// Builds a directory beside `dir`, then swaps it in.
pub fn write_dir_atomic(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<()> {
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| RiddleError::io(parent, e))?;
    }
    let tmp = sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| RiddleError::io(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| RiddleError::io(&tmp, e))?;
    for (name, bytes) in files {
        let p = tmp.join(name);
        fs::write(&p, bytes).map_err(|e| RiddleError::io(&p, e))?;
    }
    if dir.exists() {
        let old = sibling(dir, "old");
        fs::rename(dir, &old).map_err(|e| RiddleError::io(dir, e))?;
        fs::rename(&tmp, dir).map_err(|e| RiddleError::io(dir, e))?;
        fs::remove_dir_all(&old).map_err(|e| RiddleError::io(&old, e))?;
    } else {
        fs::rename(&tmp, dir).map_err(|e| RiddleError::io(dir, e))?;
    }
    Ok(())
}

pub const LATENT_TENSOR: &str = "latent";

pub fn save_latent<T: Scalar>(path: &Path, w: &LatentCode<T>) -> Result<()> {
    let mut archive = TensorArchive::new();
    archive.metadata.insert("kind".into(), Value::from("latent"));
    archive
        .metadata
        .insert("layout".into(), serde_json::to_value(w.layout())?);
    archive
        .tensors
        .insert(LATENT_TENSOR.into(), w.values().clone());
    archive.write_dir(path, &[])
}

pub fn load_latent<T: Scalar>(path: &Path) -> Result<LatentCode<T>> {
    let mut archive = TensorArchive::<T>::read_dir(path)?;
    let layout: ChunkLayout = archive
        .metadata
        .get("layout")
        .cloned()
        .ok_or_else(|| RiddleError::Integrity("latent file lacks a layout".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| RiddleError::Integrity(e.to_string())))?;
    LatentCode::new(archive.take(LATENT_TENSOR)?, layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_archive() -> TensorArchive<f32> {
        let mut a = TensorArchive::new();
        a.tensors.insert("b".into(), Tensor::from_vec(1, 3, vec![1.0, -2.0, 3.5]).unwrap());
        a.tensors.insert("a".into(), Tensor::from_vec(2, 1, vec![0.25, 1e-7]).unwrap());
        a.metadata.insert("note".into(), Value::from("x"));
        a
    }

    #[test]
    fn encode_decode_roundtrip() {
        let a = sample_archive();
        let (idx, blob) = a.encode();
        assert_eq!(blob.len(), 5 * 4);
        let back = TensorArchive::<f32>::decode(&idx, &blob).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.encode(), (idx, blob));
    }

    #[test]
    fn rejects_truncation_and_tampering() {
        let (idx, blob) = sample_archive().encode();
        let short = &blob[..blob.len() - 1];
        assert!(matches!(TensorArchive::<f32>::decode(&idx, short), Err(RiddleError::Integrity(_))));
        let mut flipped = blob.clone();
        flipped[0] ^= 1;
        assert!(matches!(TensorArchive::<f32>::decode(&idx, &flipped), Err(RiddleError::Integrity(_))));
        assert!(matches!(
            TensorArchive::<f32>::decode(&idx[..idx.len() / 2], &blob),
            Err(RiddleError::Integrity(_))
        ));
        assert!(matches!(TensorArchive::<f64>::decode(&idx, &blob), Err(RiddleError::Integrity(_))));
    }

    #[test]
    fn version_is_checked() {
        let (idx, blob) = sample_archive().encode();
        let text = String::from_utf8(idx).unwrap().replace("\"version\": 1", "\"version\": 9");
        let err = TensorArchive::<f32>::decode(text.as_bytes(), &blob).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn directory_write_replaces_atomically() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ck");
        sample_archive().write_dir(&dir, &[("config.json", b"{}".to_vec())]).unwrap();
        let mut second = sample_archive();
        second.metadata.insert("note".into(), Value::from("y"));
        second.write_dir(&dir, &[]).unwrap();
        assert_eq!(TensorArchive::<f32>::read_dir(&dir).unwrap(), second);
        assert!(!dir.join("config.json").exists());
        let leftovers: Vec<_> = fs::read_dir(tmp.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn latent_file_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("w.latent");
        let w = LatentCode::<f32>::sample(3, ChunkLayout::new(1, 1, 4).unwrap(), 8);
        save_latent(&path, &w).unwrap();
        assert_eq!(load_latent::<f32>(&path).unwrap(), w);
    }
}
