//! Named parameters and the binary checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   "HSCK"                 4 bytes
//! version u8 (= 1)
//! count   u32
//! count × entry:
//!   name_len u16, name (UTF-8)
//!   dtype    u8   (0 real32, 1 real64, 2 complex64, 3 complex128)
//!   ndim     u8,  dims u64 × ndim
//!   values   row-major, little-endian, dtype width each
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HSCK";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            requires_grad: true,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn to_bytes(&self, dtype: DType) -> Result<Vec<u8>> {
        if !matches!(dtype, DType::Real32 | DType::Real64) {
            return Err(Error::Usage(format!("parameters are real; cannot store as {dtype:?}")));
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(dtype.code());
            out.push(p.tensor.ndim() as u8);
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.tensor.data() {
                match dtype {
                    DType::Real32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    _ => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, dtype: DType) -> Result<()> {
        let bytes = self.to_bytes(dtype)?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    /// Overwrites parameter values from a checkpoint. Every stored entry must
    /// name an existing parameter of identical shape, and every parameter must
    /// be present.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = read_checkpoint(bytes)?;
        if entries.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} entries, model has {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (name, tensor) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Data(format!("unknown parameter {name} in checkpoint")))?;
            let p = &mut self.params[id.0];
            if p.tensor.shape() != tensor.shape() {
                return Err(Error::Data(format!(
                    "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                    tensor.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = tensor;
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        self.load_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parses a checkpoint into `(name, tensor)` pairs in file order.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let version = c.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(c.take(4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_code(c.u8()?)
            .ok_or_else(|| Error::Data(format!("bad dtype code for {name}")))?;
        let ndim = c.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(c.take(8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * dtype.byte_width())?;
        let data: Vec<f64> = match dtype {
            DType::Real32 => raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            DType::Real64 => raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            _ => return Err(Error::Data(format!("complex parameter {name} not supported"))),
        };
        out.push((name, Tensor::new(&shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Data("trailing bytes after checkpoint".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::zeros(&[1])).unwrap();
        assert!(s.add("a.w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn load_rejects_shape_change_and_bad_magic() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2, 2])).unwrap();
        let bytes = s.to_bytes(DType::Real64).unwrap();
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[4])).unwrap();
        assert!(other.load_bytes(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(s.load_bytes(&bad).is_err());
        assert!(s.load_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn real64_checkpoint_roundtrips_exactly(
            vals in proptest::collection::vec(-1e6f64..1e6, 1..40),
            name in "[a-z]{1,8}(\\.[a-z0-9_]{1,8}){0,3}",
        ) {
            let mut s = ParamStore::new();
            s.add(name.clone(), Tensor::new(&[vals.len()], vals.clone()).unwrap()).unwrap();
            s.add("bias", Tensor::full(&[1, 2], 0.5)).unwrap();
            let bytes = s.to_bytes(DType::Real64).unwrap();
            let mut t = s.clone();
            for id in t.ids().collect::<Vec<_>>() {
                t.get_mut(id).tensor = Tensor::zeros(s.get(id).tensor.shape());
            }
            t.load_bytes(&bytes).unwrap();
            prop_assert_eq!(t.by_name(&name).unwrap().tensor.data(), &vals[..]);
            prop_assert_eq!(t.to_bytes(DType::Real64).unwrap(), bytes);
        }
    }
}
