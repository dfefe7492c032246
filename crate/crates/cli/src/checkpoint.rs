//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VGWF" | u32 version | u32 len, JSON text | u32 count
//! count × { u32 len, name | u8 dtype | u32 rank | rank × u64 dim | raw data }
//! u32 CRC32 of every preceding byte
//! ```

use std::path::Path;

use geoflow::numerics::{DType, ParamSet};
use geoflow::{Scalar, Tensor};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"VGWF";
pub const VERSION: u32 = 1;

/// Tensor payload in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }
}

/// JSON header plus an ordered tensor table.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub header: String,
    pub tensors: Vec<(String, StoredTensor)>,
}

impl TensorFile {
    pub fn new(header: String) -> Self {
        Self {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), StoredTensor::from_tensor(t)));
    }

    pub fn from_params<T: Scalar>(header: String, params: &ParamSet<T>) -> Self {
        let mut f = Self::new(header);
        for (name, t) in params.iter() {
            f.push(name.clone(), t);
        }
        f
    }

    /// Rebuilds a parameter set whose names must equal `expected` exactly, in order.
    pub fn to_params<'a, T: Scalar>(&self, expected: impl IntoIterator<Item = &'a String>) -> Result<ParamSet<T>, String> {
        let expected: Vec<&String> = expected.into_iter().collect();
        let got: Vec<&String> = self.tensors.iter().map(|(n, _)| n).collect();
        if expected != got {
            let missing: Vec<_> = expected.iter().filter(|n| !got.contains(n)).collect();
            let extra: Vec<_> = got.iter().filter(|n| !expected.contains(n)).collect();
            return Err(format!(
                "tensor names differ from the model (missing {missing:?}, unexpected {extra:?})"
            ));
        }
        let mut p = ParamSet::new();
        for (name, t) in &self.tensors {
            p.insert(name.clone(), t.to_tensor()).map_err(|e| e.to_string())?;
        }
        Ok(p)
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.push(t.dtype().tag());
            let shape = t.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                StoredTensor::F64(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err("file too short".into());
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4-byte trailer"));
        let actual = crc32fast::hash(body);
        if &body[..4] != MAGIC {
            return Err("bad magic".into());
        }
        if stored != actual {
            return Err(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let header = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| "header is not UTF-8".to_string())?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| "tensor name is not UTF-8".to_string())?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| format!("unknown dtype tag {tag}"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor too large")?;
            let raw = r.take(numel.checked_mul(dtype.size()).ok_or("tensor too large")?)?;
            let t = match dtype {
                DType::F32 => StoredTensor::F32(
                    Tensor::new(shape, raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
                        .map_err(|e| e.to_string())?,
                ),
                DType::F64 => StoredTensor::F64(
                    Tensor::new(shape, raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
                        .map_err(|e| e.to_string())?,
                ),
            };
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(format!("{} trailing bytes before CRC", body.len() - r.pos));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| CliError::format(path, m))
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8], String> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
