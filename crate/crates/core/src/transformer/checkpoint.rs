//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//! `MAGIC` (8 bytes), version `u32`, spec length `u32`, spec text
//! (`key=value` lines, UTF-8), blob count `u32`, then per blob: name length
//! `u32`, name, rank `u32`, `u64` dims, `f32` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelError, ModelSpec, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"DLMLCKPT";
pub const VERSION: u32 = 1;

/// A named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, max: usize) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > max {
        return Err(bad(format!("string length {n} exceeds {max}")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| bad("invalid UTF-8"))
}

pub fn write_blobs(w: &mut impl Write, blobs: &[Blob]) -> Result<()> {
    w.write_all(&(blobs.len() as u32).to_le_bytes())?;
    for b in blobs {
        w.write_all(&(b.name.len() as u32).to_le_bytes())?;
        w.write_all(b.name.as_bytes())?;
        w.write_all(&(b.shape.len() as u32).to_le_bytes())?;
        for &d in &b.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(b.data.len() * 4);
        for v in &b.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_blobs(r: &mut impl Read) -> Result<Vec<Blob>> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = read_string(r, 1 << 12)?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(bad(format!("{name}: rank {rank} too large")));
        }
        let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(Blob { name, shape, data });
    }
    Ok(out)
}

fn write_header(w: &mut impl Write, spec: &ModelSpec) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let text = spec.to_kv();
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<ModelSpec> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    ModelSpec::from_kv(&read_string(r, 1 << 16)?)
}

impl<T: Scalar> Model<T> {
    pub fn to_blobs(&self) -> Vec<Blob> {
        self.names
            .iter()
            .zip(&self.params)
            .map(|(n, p)| Blob {
                name: n.clone(),
                shape: p.shape().to_vec(),
                data: p.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_header(w, &self.spec)?;
        write_blobs(w, &self.to_blobs())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let spec = read_header(r)?;
        let blobs = read_blobs(r)?;
        let mut model = Model::<T>::init(spec.clone(), 0)?;
        if blobs.len() != model.params.len() {
            return Err(bad(format!("expected {} parameter blobs, found {}", model.params.len(), blobs.len())));
        }
        let mut params = Vec::with_capacity(blobs.len());
        for (b, name) in blobs.into_iter().zip(&model.names) {
            if &b.name != name {
                return Err(bad(format!("expected parameter {name}, found {}", b.name)));
            }
            params.push(Tensor::new(b.shape, b.data.iter().map(|&v| T::from_f64(v as f64)).collect())?);
        }
        model.set_params(params)?;
        Ok(model)
    }

    /// Writes to `path` through a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
