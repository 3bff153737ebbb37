//! Versioned binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MUSC" | u16 version | u32 manifest_len | manifest (UTF-8 JSON)
//! u32 tensor_count
//! per tensor: u32 name_len | name | u32 ndim | u64 dims[ndim] | f32 data[prod(dims)]
//! ```
//!
//! Values are stored as `f32`; parameters are rounded to `f32` before they
//! are saved so a save/load cycle is lossless.

use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::nn::Parameters;

pub const MAGIC: &[u8; 4] = b"MUSC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn to_array(&self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.iter().map(|v| *v as f64).collect())
            .expect("shape matches data length")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// JSON object; keys are kept sorted so the bytes are canonical.
    pub manifest: Map<String, Value>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(manifest: Map<String, Value>) -> Self {
        Self {
            manifest,
            tensors: Vec::new(),
        }
    }

    /// Appends every tensor of `params` under `prefix.`.
    pub fn push_params<P: Parameters>(&mut self, prefix: &str, params: &P) {
        for (name, t) in params.tensors() {
            self.tensors.push(NamedTensor {
                name: format!("{prefix}.{name}"),
                shape: t.shape().to_vec(),
                data: t.iter().map(|v| *v as f32).collect(),
            });
        }
    }

    /// Fills `params` from the tensors stored under `prefix.`; every tensor
    /// must be present with the expected shape.
    pub fn load_params<P: Parameters>(&self, prefix: &str, params: &mut P) -> Result<()> {
        for (name, mut t) in params.tensors_mut() {
            let full = format!("{prefix}.{name}");
            let stored = self
                .tensor(&full)
                .ok_or_else(|| Error::Format(format!("missing tensor {full}")))?;
            if stored.shape != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {full}: stored shape {:?}, expected {:?}",
                    stored.shape,
                    t.shape()
                )));
            }
            for (dst, src) in t.iter_mut().zip(&stored.data) {
                *dst = *src as f64;
            }
        }
        Ok(())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.iter().any(|t| t.name.starts_with(&p))
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&Value::Object(self.manifest.clone())).expect("json values always serialize");
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let manifest: Value =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let manifest = match manifest {
            Value::Object(m) => m,
            _ => return Err(Error::Format("manifest is not an object".into())),
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(r.array()?) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Format("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}
