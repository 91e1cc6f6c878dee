//! Manifest + blob tensor container.
//!
//! Layout on disk:
//!
//! ```text
//! b"DFPA" | u32 LE version | u64 LE manifest length | manifest (UTF-8 JSON) | blob
//! ```
//!
//! The manifest lists every tensor as `(name, dtype, shape, offset, length)`
//! with offsets relative to the start of the blob. Tensors are packed back to
//! back in manifest order; values are little-endian `f32`/`f64`.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"DFPA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub metadata: BTreeMap<String, Value>,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    /// Checks offsets, lengths and names; returns the total blob length the
    /// manifest requires.
    pub fn validate(&self) -> Result<u64> {
        let mut names = HashSet::new();
        let mut cursor = 0u64;
        for t in &self.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(Error::ArchiveFormat(format!("duplicate tensor name {:?}", t.name)));
            }
            let expected = (t.numel() * t.dtype.size()) as u64;
            if t.length != expected {
                return Err(Error::ArchiveFormat(format!(
                    "tensor {:?}: length {} does not match shape {:?} of {} ({} bytes)",
                    t.name,
                    t.length,
                    t.shape,
                    t.dtype.name(),
                    expected
                )));
            }
            if t.offset < cursor {
                return Err(Error::ArchiveFormat(format!(
                    "tensor {:?}: offset {} overlaps previous tensor ending at {}",
                    t.name, t.offset, cursor
                )));
            }
            if t.offset > cursor {
                return Err(Error::ArchiveFormat(format!(
                    "tensor {:?}: gap before offset {} (expected {})",
                    t.name, t.offset, cursor
                )));
            }
            cursor += t.length;
        }
        Ok(cursor)
    }
}

/// A fully validated archive held in memory.
#[derive(Debug, Clone)]
pub struct Archive {
    manifest: Manifest,
    blob: Vec<u8>,
    index: BTreeMap<String, usize>,
}

impl Archive {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::ArchiveFormat("missing archive magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::ArchiveFormat(format!("unsupported archive version {version}")));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let rest = &bytes[16..];
        if manifest_len > rest.len() {
            return Err(Error::ArchiveFormat(format!(
                "manifest length {manifest_len} exceeds file size"
            )));
        }
        let text = std::str::from_utf8(&rest[..manifest_len])
            .map_err(|e| Error::ArchiveFormat(format!("manifest is not UTF-8: {e}")))?;
        let manifest: Manifest =
            serde_json::from_str(text).map_err(|e| Error::ArchiveFormat(format!("malformed manifest: {e}")))?;
        let needed = manifest.validate()?;
        let blob = &rest[manifest_len..];
        if blob.len() as u64 != needed {
            return Err(Error::ArchiveFormat(format!(
                "blob is {} bytes but manifest declares {}",
                blob.len(),
                needed
            )));
        }
        let index = manifest
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
        Ok(Self {
            manifest,
            blob: blob.to_vec(),
            index,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn metadata(&self, key: &str) -> Option<&Value> {
        self.manifest.metadata.get(key)
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.index
            .get(name)
            .map(|&i| &self.manifest.tensors[i])
            .ok_or_else(|| Error::ArchiveFormat(format!("missing tensor {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.manifest.tensors.iter().map(|t| t.name.as_str())
    }

    /// Reads a tensor whose stored dtype must equal `T`.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<(Vec<usize>, Vec<T>)> {
        let entry = self.entry(name)?;
        if entry.dtype != T::DTYPE {
            return Err(Error::ArchiveFormat(format!(
                "tensor {name:?} is {}, expected {}",
                entry.dtype.name(),
                T::DTYPE.name()
            )));
        }
        Ok((entry.shape.clone(), decode::<T>(self.raw(entry))))
    }

    /// Reads a tensor of either dtype, widened to `f64`.
    pub fn tensor_f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let entry = self.entry(name)?;
        let values = match entry.dtype {
            DType::F32 => decode::<f32>(self.raw(entry)).into_iter().map(f64::from).collect(),
            DType::F64 => decode::<f64>(self.raw(entry)),
        };
        Ok((entry.shape.clone(), values))
    }

    fn raw(&self, entry: &TensorEntry) -> &[u8] {
        &self.blob[entry.offset as usize..(entry.offset + entry.length) as usize]
    }
}

fn decode<T: Scalar>(bytes: &[u8]) -> Vec<T> {
    bytes.chunks_exact(T::DTYPE.size()).map(T::read_le).collect()
}

#[derive(Debug, Default, Clone)]
pub struct ArchiveWriter {
    metadata: BTreeMap<String, Value>,
    tensors: Vec<TensorEntry>,
    blob: Vec<u8>,
}

impl ArchiveWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn metadata(&mut self, key: impl Into<String>, value: Value) -> &mut Self {
        self.metadata.insert(key.into(), value);
        self
    }

    pub fn add<T: Scalar>(&mut self, name: impl Into<String>, shape: &[usize], values: &[T]) -> &mut Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, values.len(), "shape/value count mismatch");
        let offset = self.blob.len() as u64;
        for &v in values {
            v.write_le(&mut self.blob);
        }
        self.tensors.push(TensorEntry {
            name: name.into(),
            dtype: T::DTYPE,
            shape: shape.to_vec(),
            offset,
            length: self.blob.len() as u64 - offset,
        });
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            metadata: self.metadata.clone(),
            tensors: self.tensors.clone(),
        };
        let text = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + text.len() + self.blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        out.extend_from_slice(&self.blob);
        out
    }

    /// Writes to a temporary sibling and renames into place.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }
}

/// Writes `bytes` to `path` via a temporary file in the same directory so a
/// failed write never leaves a partial artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(Error::from)
}
