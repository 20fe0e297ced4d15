//! Flat binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "DARTCKPT"
//! version    u32      1
//! kind       u32 length + UTF-8
//! meta       u32 length + UTF-8 (JSON, model hyperparameters)
//! n_tensors  u32
//! per tensor: name (u32 length + UTF-8), rank u32, dims u64 × rank,
//!             activation u8 (255 when not applicable)
//! n_params   u64
//! params     f64 × n_params
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Activation, NnError};

pub const MAGIC: &[u8; 8] = b"DARTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub activation: Option<Activation>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, activation: Option<Activation>) -> Self {
        Self {
            name: name.into(),
            dims,
            activation,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: String,
    pub tensors: Vec<TensorSpec>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: impl Into<String>, tensors: Vec<TensorSpec>, params: Vec<f64>) -> Result<Self, NnError> {
        let total: usize = tensors.iter().map(TensorSpec::len).sum();
        if total != params.len() {
            return Err(NnError::Checkpoint(format!(
                "tensor specs cover {total} values but {} parameters were given",
                params.len()
            )));
        }
        Ok(Self {
            kind: kind.into(),
            meta: meta.into(),
            tensors,
            params,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), NnError> {
        if self.kind != kind {
            return Err(NnError::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.params.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.push(t.activation.map_or(255, Activation::code));
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = r.string()?;
        let meta = r.string()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let code = r.take(1)?[0];
            let activation = match code {
                255 => None,
                c => Some(Activation::from_code(c).ok_or_else(|| NnError::Checkpoint(format!("bad activation code {c}")))?),
            };
            tensors.push(TensorSpec { name, dims, activation });
        }
        let count = r.u64()? as usize;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| NnError::Checkpoint("size overflow".into()))?)?;
        let params = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if r.pos != bytes.len() {
            return Err(NnError::Checkpoint("trailing bytes".into()));
        }
        Checkpoint::new(kind, meta, tensors, params)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.bytes.len() {
            return Err(NnError::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, NnError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| NnError::Checkpoint(e.to_string()))
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), NnError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&ckpt.to_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}
