//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `PROTODA\0`, a little-endian `u64` header length,
//! a JSON header, then the raw little-endian tensor payload. The header
//! carries the format version, the archive kind, the element dtype, a free
//! JSON metadata object (config snapshot etc.), a tensor table and a SHA-256
//! content hash over tensor names, shapes and bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};

pub const MAGIC: &[u8; 8] = b"PROTODA\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub kind: String,
    pub dtype: Dtype,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub content_hash: String,
}

/// Incremental SHA-256 over named tensors.
#[derive(Default)]
pub struct ContentHasher(Sha256);

impl ContentHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update_raw(&mut self, name: &str, shape: &[usize], bytes: &[u8]) {
        self.0.update((name.len() as u64).to_le_bytes());
        self.0.update(name.as_bytes());
        self.0.update((shape.len() as u64).to_le_bytes());
        for &d in shape {
            self.0.update((d as u64).to_le_bytes());
        }
        self.0.update(bytes);
    }

    pub fn update<T: Scalar>(&mut self, name: &str, shape: &[usize], data: &[T]) {
        let mut bytes = Vec::with_capacity(data.len() * T::DTYPE.width());
        for &v in data {
            v.write_le(&mut bytes);
        }
        self.update_raw(name, shape, &bytes);
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

pub struct ArchiveWriter {
    kind: String,
    dtype: Dtype,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    payload: Vec<u8>,
    hasher: ContentHasher,
}

impl ArchiveWriter {
    pub fn new<T: Scalar>(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            dtype: T::DTYPE,
            meta,
            tensors: Vec::new(),
            payload: Vec::new(),
            hasher: ContentHasher::new(),
        }
    }

    pub fn tensor<T: Scalar>(&mut self, name: &str, shape: &[usize], data: &[T]) -> Result<()> {
        if T::DTYPE != self.dtype {
            return Err(Error::Checkpoint(format!("tensor {name} dtype differs from archive dtype")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Checkpoint(format!("tensor {name}: shape {shape:?} does not match {} values", data.len())));
        }
        let start = self.payload.len();
        for &v in data {
            v.write_le(&mut self.payload);
        }
        self.hasher
            .update_raw(name, shape, &self.payload[start..]);
        self.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: start,
            len: data.len(),
        });
        Ok(())
    }

    /// Writes atomically (temp file + rename) and returns the content hash.
    pub fn write(self, path: &Path) -> Result<String> {
        let header = Header {
            version: FORMAT_VERSION,
            kind: self.kind,
            dtype: self.dtype,
            meta: self.meta,
            tensors: self.tensors,
            content_hash: self.hasher.finish(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(MAGIC)?;
            f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
            f.write_all(&header_bytes)?;
            f.write_all(&self.payload)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(header.content_hash)
    }
}

#[derive(Debug, Clone)]
pub struct Archive {
    pub header: Header,
    payload: Vec<u8>,
}

impl Archive {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path)?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint archive", path.display())));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + hlen {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
                header.version
            )));
        }
        let payload = bytes[16 + hlen..].to_vec();
        let archive = Self { header, payload };
        let recomputed = archive.recompute_hash()?;
        if recomputed != archive.header.content_hash {
            return Err(Error::Checkpoint(format!("content hash mismatch in {}", path.display())));
        }
        Ok(archive)
    }

    fn raw(&self, entry: &TensorEntry) -> Result<&[u8]> {
        let w = self.header.dtype.width();
        let end = entry.offset + entry.len * w;
        self.payload
            .get(entry.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} exceeds payload", entry.name)))
    }

    fn recompute_hash(&self) -> Result<String> {
        let mut h = ContentHasher::new();
        for e in &self.header.tensors {
            h.update_raw(&e.name, &e.shape, self.raw(e)?);
        }
        Ok(h.finish())
    }

    pub fn kind(&self) -> &str {
        &self.header.kind
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.header.meta
    }

    pub fn content_hash(&self) -> &str {
        &self.header.content_hash
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.header.kind)));
        }
        Ok(())
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<(Vec<usize>, Vec<T>)> {
        let entry = self
            .header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let w = self.header.dtype.width();
        let data = self
            .raw(entry)?
            .chunks_exact(w)
            .map(|c| T::read_le(c, self.header.dtype))
            .collect();
        Ok((entry.shape.clone(), data))
    }

    /// Copies tensor `name` into `dst`, checking the element count.
    pub fn load_into<T: Scalar>(&self, name: &str, dst: &mut [T]) -> Result<()> {
        let (_, data) = self.tensor::<T>(name)?;
        if data.len() != dst.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: {} values stored, {} expected",
                data.len(),
                dst.len()
            )));
        }
        dst.copy_from_slice(&data);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash_verification() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut w = ArchiveWriter::new::<f32>("test", serde_json::json!({"k": 1}));
        w.tensor("x", &[2, 2], &[1.0f32, 2.0, 3.0, 4.0]).unwrap();
        w.tensor("y", &[1], &[-0.5f32]).unwrap();
        let hash = w.write(&path).unwrap();
        let a = Archive::read(&path).unwrap();
        assert_eq!(a.content_hash(), hash);
        assert_eq!(a.kind(), "test");
        assert_eq!(a.meta()["k"], 1);
        let (shape, x) = a.tensor::<f32>("x").unwrap();
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(x, vec![1.0, 2.0, 3.0, 4.0]);
        let (_, y) = a.tensor::<f64>("y").unwrap();
        assert_eq!(y, vec![-0.5]);

        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Archive::read(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let err = Archive::read(Path::new("/nonexistent/base.ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }

    #[test]
    fn hasher_matches_archive_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        let mut w = ArchiveWriter::new::<f64>("t", serde_json::Value::Null);
        w.tensor("w", &[3], &[1.0f64, 2.0, 3.0]).unwrap();
        let hash = w.write(&path).unwrap();
        let mut h = ContentHasher::new();
        h.update("w", &[3], &[1.0f64, 2.0, 3.0]);
        assert_eq!(h.finish(), hash);
    }
}
