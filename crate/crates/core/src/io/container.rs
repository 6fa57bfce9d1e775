//! The tensor container: magic `MGT1`, little-endian, row-major payloads.
//!
//! Layout: `"MGT1"`, `u32` tensor count, then per tensor a `u16` name
//! length, the UTF-8 name, a `u8` dtype (0 = f32, 1 = f64), a `u8` ndim,
//! `ndim x u64` dims, and the raw payload. Names must be unique and the
//! reader rejects trailing bytes.

use std::path::Path;

use super::{io_err, write_atomic, IoError};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"MGT1";
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f64(dims: Vec<u64>, data: Vec<f64>) -> Result<Self, IoError> {
        let expect: u64 = dims.iter().product();
        if expect != data.len() as u64 {
            return Err(IoError::ShapeMismatch {
                name: String::new(),
                dims,
                got: data.len(),
            });
        }
        Ok(Self {
            dims,
            data: TensorData::F64(data),
        })
    }

    pub fn f32(dims: Vec<u64>, data: Vec<f32>) -> Result<Self, IoError> {
        let expect: u64 = dims.iter().product();
        if expect != data.len() as u64 {
            return Err(IoError::ShapeMismatch {
                name: String::new(),
                dims,
                got: data.len(),
            });
        }
        Ok(Self {
            dims,
            data: TensorData::F32(data),
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: vec![1],
            data: TensorData::F64(vec![value]),
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Self {
            dims: vec![values.len() as u64],
            data: TensorData::F64(values.to_vec()),
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: TensorData::F64(m.data().to_vec()),
        }
    }

    /// Values widened to f64 regardless of storage dtype.
    pub fn values(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn to_matrix(&self, name: &str) -> Result<Matrix, IoError> {
        if self.dims.len() != 2 {
            return Err(IoError::BadTensor {
                name: name.to_string(),
                reason: format!("expected 2 dims, found {}", self.dims.len()),
            });
        }
        Matrix::new(self.dims[0] as usize, self.dims[1] as usize, self.values()).map_err(|e| {
            IoError::BadTensor {
                name: name.to_string(),
                reason: e.to_string(),
            }
        })
    }

    pub fn to_scalar(&self, name: &str) -> Result<f64, IoError> {
        let v = self.values();
        if v.len() != 1 {
            return Err(IoError::BadTensor {
                name: name.to_string(),
                reason: format!("expected a scalar, found {} values", v.len()),
            });
        }
        Ok(v[0])
    }
}

/// An ordered, uniquely named collection of tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    entries: Vec<(String, Tensor)>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate tensor name {name}"
        );
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, IoError> {
        self.get(name).ok_or_else(|| IoError::MissingTensor {
            name: name.to_string(),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match &tensor.data {
                TensorData::F32(_) => out.push(DTYPE_F32),
                TensorData::F64(_) => out.push(DTYPE_F64),
            }
            out.push(tensor.dims.len() as u8);
            for d in &tensor.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &tensor.data {
                TensorData::F32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::F64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self, IoError> {
        let mut r = Reader {
            bytes,
            offset: 0,
            path: origin,
        };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(IoError::BadMagic {
                path: origin.to_path_buf(),
                offset: 0,
                found: magic.to_vec(),
                expected: "MGT1",
            });
        }
        let count = r.u32("tensor count")?;
        let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name_off = r.offset;
            let name_bytes = r.take(name_len, "tensor name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| IoError::BadName {
                    path: origin.to_path_buf(),
                    offset: name_off,
                })?
                .to_string();
            if entries.iter().any(|(n, _)| *n == name) {
                return Err(IoError::DuplicateName {
                    path: origin.to_path_buf(),
                    name,
                });
            }
            let dtype_off = r.offset;
            let dtype = r.u8("dtype")?;
            let ndim = r.u8("ndim")? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64("dim")?);
            }
            let len: u64 = dims.iter().product();
            let data = match dtype {
                DTYPE_F32 => {
                    let raw = r.take((len * 4) as usize, "f32 payload")?;
                    TensorData::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                DTYPE_F64 => {
                    let raw = r.take((len * 8) as usize, "f64 payload")?;
                    TensorData::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                other => {
                    return Err(IoError::UnknownDtype {
                        path: origin.to_path_buf(),
                        offset: dtype_off,
                        value: other,
                    })
                }
            };
            entries.push((name, Tensor { dims, data }));
        }
        if r.offset != bytes.len() {
            return Err(IoError::TrailingBytes {
                path: origin.to_path_buf(),
                offset: r.offset,
                trailing: bytes.len() - r.offset,
            });
        }
        Ok(Self { entries })
    }

    pub fn write_to(&self, path: &Path) -> Result<(), IoError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read_from(path: &Path) -> Result<Self, IoError> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub offset: usize,
    pub path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], IoError> {
        if self.offset + n > self.bytes.len() {
            return Err(IoError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.offset,
                what,
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8, IoError> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &'static str) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
