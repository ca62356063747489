//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "CARDIOCK"
//! version      u32      currently 1
//! meta_len     u32      byte length of the metadata block
//! metadata     meta_len bytes of UTF-8 (JSON by convention)
//! count        u32      number of tensors
//! per tensor:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   ndim       u32
//!   dims       ndim x u64
//!   values     prod(dims) x f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CARDIOCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(metadata: impl Into<String>) -> Self {
        Self {
            metadata: metadata.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    /// Appends every parameter of `module`, names prefixed with `prefix.`.
    pub fn push_module<M: Module + ?Sized>(&mut self, prefix: &str, module: &M) {
        for (name, t) in module.named_params() {
            self.push(format!("{prefix}.{name}"), t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies tensors named `prefix.<param>` into `module`, checking shapes.
    pub fn load_module<M: Module + ?Sized>(&self, prefix: &str, module: &mut M) -> Result<()> {
        let names: Vec<String> = module.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(module.params_mut()) {
            let key = format!("{prefix}.{name}");
            let src = self
                .get(&key)
                .ok_or_else(|| AutodiffError::Checkpoint(format!("missing tensor `{key}`")))?;
            if src.shape() != slot.shape() {
                return Err(AutodiffError::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    src.shape(),
                    slot.shape()
                )));
            }
            *slot = src.clone();
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_u32(&mut w, self.metadata.len())?;
        w.write_all(self.metadata.as_bytes())?;
        write_u32(&mut w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            write_u32(&mut w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(&mut w, t.ndim())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(8 * t.len());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(AutodiffError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(AutodiffError::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let metadata = read_string(&mut r, meta_len)?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = read_string(&mut r, name_len)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let len: usize = shape.iter().product();
            let mut raw = vec![0u8; 8 * len];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| AutodiffError::Checkpoint("length exceeds u32".into()))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| AutodiffError::Checkpoint(e.to_string()))
}
