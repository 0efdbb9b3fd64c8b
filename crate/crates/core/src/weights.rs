//! RAPW: a flat little-endian container of named `f32` tensors.
//!
//! ```text
//! "RAPW"  u32 version=1  u32 count
//! count x { u16 name_len, name (UTF-8), u8 rank, rank x u32 extent, f32 data (row-major) }
//! ```
//!
//! Saving also writes a `<file>.manifest` text sidecar listing each tensor's
//! name, shape and SHA-256 of its raw bytes.

use crate::tensorops::Tensor;
use sha2::{Digest, Sha256};
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const RAPW_MAGIC: &[u8; 4] = b"RAPW";
pub const RAPW_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("tensor {name}: invalid rank {rank}")]
    BadRank { name: String, rank: usize },
    #[error("tensor {name}: contains non-finite values")]
    NonFinite { name: String },
    #[error("duplicate tensor {0}")]
    Duplicate(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name}: expected shape {expected:?}, found {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{0}")]
    Invalid(String),
}

impl FormatError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        FormatError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Ordered set of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    tensors: Vec<(String, Tensor)>,
}

impl WeightFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a tensor, keeping first-insertion order.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.tensors.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.tensors.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fetches `name`, checking its shape.
    pub fn require(&self, name: &str, shape: &[usize]) -> Result<&Tensor, FormatError> {
        let t = self
            .get(name)
            .ok_or_else(|| FormatError::MissingTensor(name.to_string()))?;
        if t.shape() != shape {
            return Err(FormatError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                actual: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        let pos = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(pos).1)
    }

    pub fn merge(&mut self, other: WeightFile) {
        for (n, t) in other.tensors {
            self.insert(n, t);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Keeps only tensors whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> WeightFile {
        WeightFile {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(RAPW_MAGIC);
        out.extend_from_slice(&RAPW_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != RAPW_MAGIC {
            return Err(FormatError::BadMagic { expected: "RAPW" });
        }
        let version = r.u32("version")?;
        if version != RAPW_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let count = r.u32("tensor count")?;
        let mut file = WeightFile::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| FormatError::InvalidName)?
                .to_string();
            let rank = r.u8("rank")? as usize;
            if !(1..=4).contains(&rank) {
                return Err(FormatError::BadRank { name, rank });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or(FormatError::Truncated("data"))?, "data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|_| FormatError::NonFinite { name: name.clone() })?;
            if file.get(&name).is_some() {
                return Err(FormatError::Duplicate(name));
            }
            file.tensors.push((name, t));
        }
        if r.remaining() > 0 {
            return Err(FormatError::TrailingBytes(r.remaining()));
        }
        Ok(file)
    }

    /// One line per tensor: `name<TAB>shape<TAB>sha256`.
    pub fn manifest(&self) -> String {
        let mut s = String::from("# name\tshape\tsha256\n");
        for (name, t) in &self.tensors {
            let mut h = Sha256::new();
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
            let shape: Vec<String> = t.shape().iter().map(|e| e.to_string()).collect();
            s.push_str(&format!("{name}\t{}\t{}\n", shape.join("x"), hex::encode(h.finalize())));
        }
        s
    }

    pub fn manifest_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".manifest");
        PathBuf::from(p)
    }

    /// Writes the container and its manifest sidecar.
    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| FormatError::io(path, e))?;
        let mpath = Self::manifest_path(path);
        std::fs::write(&mpath, self.manifest()).map_err(|e| FormatError::io(&mpath, e))
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let bytes = std::fs::read(path).map_err(|e| FormatError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32(&mut self, what: &'static str) -> Result<f32, FormatError> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}
