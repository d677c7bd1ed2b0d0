//! Flat binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "GCK1"                      magic
//! u32                         record count
//! repeated:
//!   u32 name_len, name bytes  UTF-8 record name
//!   u32 ndim, u64 × ndim      shape
//!   f64 × product(shape)      values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GCK1";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            bail!(Dimension, "record {name}: shape {shape:?} does not hold {} values", data.len());
        }
        if self.get(&name).is_some() {
            bail!(Contract, "duplicate checkpoint record {name}");
        }
        self.records.push(Record { name, shape, data });
        Ok(())
    }

    pub fn put_scalar(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        self.push(name, vec![1], vec![value])
    }

    pub fn put_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        self.push(name, t.shape().to_vec(), t.to_f64_vec())
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    fn require(&self, name: &str) -> Result<&Record> {
        self.get(name).ok_or_else(|| Error::Validation(format!("checkpoint lacks record {name}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let r = self.require(name)?;
        match r.data.as_slice() {
            [v] => Ok(*v),
            _ => bail!(Validation, "record {name} is not a scalar"),
        }
    }

    pub fn usize(&self, name: &str) -> Result<usize> {
        let v = self.scalar(name)?;
        if v < 0.0 || v.fract() != 0.0 {
            bail!(Validation, "record {name} = {v} is not a count");
        }
        Ok(v as usize)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let r = self.require(name)?;
        Tensor::new(r.shape.clone(), r.data.iter().map(|&x| T::lit(x)).collect())
    }

    /// Stores every parameter as `{prefix}{param name}`.
    pub fn put_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) -> Result<()> {
        for (_, p) in store.iter() {
            self.put_tensor(format!("{prefix}{}", p.name), &p.value)?;
        }
        Ok(())
    }

    /// Loads parameters saved by [`Checkpoint::put_store`] into a store of the same layout.
    pub fn load_store<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = self.tensor(&format!("{prefix}{}", store.name(id)))?;
            store.assign(id, t)?;
        }
        Ok(())
    }

    pub fn put_optimizer<T: Scalar>(&mut self, prefix: &str, opt: &AdamW<T>, store: &ParamStore<T>) -> Result<()> {
        self.put_scalar(format!("{prefix}step"), opt.step_count() as f64)?;
        let (m, v) = opt.moments();
        for (id, p) in store.iter() {
            let shape = p.value.shape().to_vec();
            let to64 = |x: &[T]| x.iter().map(|v| v.as_f64()).collect();
            self.push(format!("{prefix}m.{}", p.name), shape.clone(), to64(&m[id.index()]))?;
            self.push(format!("{prefix}v.{}", p.name), shape, to64(&v[id.index()]))?;
        }
        Ok(())
    }

    pub fn load_optimizer<T: Scalar>(&self, prefix: &str, opt: &mut AdamW<T>, store: &ParamStore<T>) -> Result<()> {
        let step = self.usize(&format!("{prefix}step"))? as u64;
        let mut first = Vec::with_capacity(store.len());
        let mut second = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            first.push(self.tensor::<T>(&format!("{prefix}m.{}", p.name))?.into_data());
            second.push(self.tensor::<T>(&format!("{prefix}v.{}", p.name))?.into_data());
        }
        opt.restore(step, first, second)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            bail!(Validation, "not a checkpoint: bad magic bytes");
        }
        let count = cur.u32()? as usize;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Validation("record name is not UTF-8".into()))?;
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            ckpt.push(name, shape, data)?;
        }
        if cur.pos != bytes.len() {
            bail!(Validation, "{} trailing bytes after last record", bytes.len() - cur.pos);
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            bail!(Validation, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
