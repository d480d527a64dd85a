//! Named parameter collections and their on-disk container format.
//!
//! The container is a flat little-endian file:
//!
//! ```text
//! magic "CGT1" | version u32 | records...
//! record: path_len u32 | path bytes (UTF-8) | rank u32 | extents u32... | f32 data
//! ```
//!
//! Values are stored as 32-bit floats; a round trip through the container is
//! bit-exact for `f32` tensors.

use std::collections::btree_map;
use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Element, Tensor};

pub const CONTAINER_MAGIC: &[u8; 4] = b"CGT1";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a parameter container (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unknown container version {version}")]
    UnknownVersion { path: String, version: u32 },
    #[error("{path}: truncated container file")]
    Truncated { path: String },
    #[error("{path}: duplicate parameter path {param}")]
    DuplicatePath { path: String, param: String },
}

/// An ordered map from dot-separated parameter paths to tensors.
/// Iteration order is lexicographic by path.
#[derive(Debug)]
pub struct ParameterSet<E: Element> {
    entries: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> Default for ParameterSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Clone for ParameterSet<E> {
    fn clone(&self) -> Self {
        ParameterSet { entries: self.entries.clone() }
    }
}

impl<E: Element> ParameterSet<E> {
    pub fn new() -> Self {
        ParameterSet { entries: BTreeMap::new() }
    }

    /// Insert a tensor under a unique path.
    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<E>) {
        let path = path.into();
        let prev = self.entries.insert(path.clone(), tensor);
        assert!(prev.is_none(), "duplicate parameter path {path}");
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<E>> {
        self.entries.get(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> btree_map::Iter<'_, String, Tensor<E>> {
        self.entries.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Merge another set into this one; paths must stay unique.
    pub fn extend(&mut self, other: ParameterSet<E>) {
        for (path, tensor) in other.entries {
            self.insert(path, tensor);
        }
    }

    /// Total number of scalar elements across all tensors.
    pub fn count_params(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for tensor in self.entries.values() {
            tensor.zero_grad();
        }
    }

    pub fn set_requires_grad(&self, value: bool) {
        for tensor in self.entries.values() {
            tensor.set_requires_grad(value);
        }
    }

    /// SHA-256 over the serialized container bytes; stable identity for
    /// "are these exactly the same values" checks.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_bytes());
        hex_string(&hasher.finalize())
    }

    /// Serialize to the container byte format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        for (path, tensor) in &self.entries {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            let shape = tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &extent in shape {
                out.extend_from_slice(&(extent as u32).to_le_bytes());
            }
            for &v in tensor.data().iter() {
                out.extend_from_slice(&v.to_f32().to_le_bytes());
            }
        }
        out
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write a parameter set to `path` atomically (temp file + rename).
pub fn write_parameter_container<E: Element>(
    set: &ParameterSet<E>,
    path: &Path,
) -> Result<(), ContainerError> {
    let display = path.display().to_string();
    let io_err = |source| ContainerError::Io { path: display.clone(), source };
    let tmp = path.with_extension("tmp");
    {
        let mut file = fs::File::create(&tmp).map_err(io_err)?;
        file.write_all(&set.to_bytes())
            .map_err(|source| ContainerError::Io { path: display.clone(), source })?;
        file.sync_all()
            .map_err(|source| ContainerError::Io { path: display.clone(), source })?;
    }
    fs::rename(&tmp, path).map_err(|source| ContainerError::Io { path: display, source })
}

/// Read a parameter container; tensors come back as plain leaves with
/// `requires_grad` unset (loading into a model re-binds values by path).
pub fn read_parameter_container<E: Element>(
    path: &Path,
) -> Result<ParameterSet<E>, ContainerError> {
    let display = path.display().to_string();
    let bytes = fs::read(path)
        .map_err(|source| ContainerError::Io { path: display.clone(), source })?;
    parse_container(&bytes, &display)
}

pub(crate) fn parse_container<E: Element>(
    bytes: &[u8],
    origin: &str,
) -> Result<ParameterSet<E>, ContainerError> {
    let mut cursor = io::Cursor::new(bytes);
    let truncated = || ContainerError::Truncated { path: origin.to_string() };

    let mut magic = [0u8; 4];
    cursor.read_exact(&mut magic).map_err(|_| truncated())?;
    if &magic != CONTAINER_MAGIC {
        return Err(ContainerError::BadMagic { path: origin.to_string() });
    }
    let version = read_u32(&mut cursor).ok_or_else(truncated)?;
    if version != CONTAINER_VERSION {
        return Err(ContainerError::UnknownVersion { path: origin.to_string(), version });
    }

    let mut set = ParameterSet::new();
    loop {
        let Some(path_len) = read_u32(&mut cursor) else { break };
        let mut path_bytes = vec![0u8; path_len as usize];
        cursor.read_exact(&mut path_bytes).map_err(|_| truncated())?;
        let param = String::from_utf8(path_bytes)
            .map_err(|_| ContainerError::BadMagic { path: origin.to_string() })?;
        let rank = read_u32(&mut cursor).ok_or_else(truncated)?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(read_u32(&mut cursor).ok_or_else(truncated)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            cursor.read_exact(&mut buf).map_err(|_| truncated())?;
            data.push(E::from_f32(f32::from_le_bytes(buf)));
        }
        if set.get(&param).is_some() {
            return Err(ContainerError::DuplicatePath {
                path: origin.to_string(),
                param,
            });
        }
        set.insert(param, Tensor::from_vec(data, &shape));
    }
    Ok(set)
}

fn read_u32(cursor: &mut io::Cursor<&[u8]>) -> Option<u32> {
    let mut buf = [0u8; 4];
    cursor.read_exact(&mut buf).ok()?;
    Some(u32::from_le_bytes(buf))
}
