//! Portable binary checkpoint files.
//!
//! Layout (all integers little-endian):
//! magic `GLNS`, format version u32, tensor count u32; per tensor the
//! name (u32 length + UTF-8 bytes), rank u32, dims as u32 each, payload as
//! IEEE-754 f32 values; then metadata count u32 followed by length-prefixed
//! UTF-8 key/value pairs. Round trips are bit-exact.

use crate::error::{Error, Result};
use crate::tensor::TensorF;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"GLNS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub tensors: Vec<(String, TensorF)>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(tensors: Vec<(String, TensorF)>) -> Self {
        Self { format_version: FORMAT_VERSION, tensors, metadata: BTreeMap::new() }
    }

    pub fn with_metadata(mut self, key: &str, value: &str) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorF> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require_tensor(&self, name: &str) -> Result<&TensorF> {
        self.tensor(name)
            .ok_or_else(|| Error::MissingArtifact(format!("tensor '{name}' not in checkpoint")))
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::MissingArtifact(format!("metadata '{key}' not in checkpoint")))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&ckpt.format_version.to_le_bytes());
    buf.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &ckpt.tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(ckpt.metadata.len() as u32).to_le_bytes());
    for (k, v) in &ckpt.metadata {
        for s in [k, v] {
            let sb = s.as_bytes();
            buf.extend_from_slice(&(sb.len() as u32).to_le_bytes());
            buf.extend_from_slice(sb);
        }
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedPayload { path: self.path.display().to_string() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::MalformedHeader {
            path: self.path.display().to_string(),
            reason: "non-UTF-8 string".to_string(),
        })
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;

    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(Error::MalformedHeader {
            path: path.display().to_string(),
            reason: "bad magic bytes".to_string(),
        });
    }
    let mut cur = Cursor { bytes: &bytes, pos: 4, path };
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.display().to_string(),
            expected: FORMAT_VERSION,
            got: version,
        });
    }
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = cur.string()?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4)?;
        let mut data = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        tensors.push((name, TensorF::new(shape, data)?));
    }
    let meta_count = cur.u32()? as usize;
    let mut metadata = BTreeMap::new();
    for _ in 0..meta_count {
        let k = cur.string()?;
        let v = cur.string()?;
        metadata.insert(k, v);
    }
    Ok(Checkpoint { format_version: version, tensors, metadata })
}
