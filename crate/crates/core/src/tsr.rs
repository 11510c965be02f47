//! TSR binary tensor files.
//!
//! Layout: magic `TSR1`, `u8` dtype (0 = f32, 1 = f64, 2 = i32), `u8` ndim,
//! `ndim` little-endian `u32` dims, then the little-endian row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 4] = b"TSR1";

#[derive(Debug, Clone, PartialEq)]
pub enum TsrData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl TsrData {
    pub fn dtype(&self) -> DType {
        match self {
            TsrData::F32(_) => DType::F32,
            TsrData::F64(_) => DType::F64,
            TsrData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TsrData::F32(v) => v.len(),
            TsrData::F64(v) => v.len(),
            TsrData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An n-dimensional array as stored in a TSR file.
#[derive(Debug, Clone, PartialEq)]
pub struct TsrArray {
    pub dims: Vec<usize>,
    pub data: TsrData,
}

impl TsrArray {
    pub fn new(dims: Vec<usize>, data: TsrData) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "TSR dims {:?} hold {} values, payload has {}",
                dims,
                n,
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::arg("TSR supports at most 255 dims"));
        }
        Ok(TsrArray { dims, data })
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor4<T>) -> Self {
        TsrArray {
            dims: t.dims().to_vec(),
            data: scalars_to_data(t.data()),
        }
    }

    pub fn from_matrix<T: Scalar>(m: &Matrix<T>) -> Self {
        TsrArray {
            dims: vec![m.rows(), m.cols()],
            data: scalars_to_data(m.data()),
        }
    }

    pub fn from_i32(values: &[i32]) -> Self {
        TsrArray {
            dims: vec![values.len()],
            data: TsrData::I32(values.to_vec()),
        }
    }

    /// Interprets a real-valued array of rank ≤ 4 as a tensor, padding
    /// missing leading dims with 1.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor4<T>> {
        if self.dims.len() > 4 {
            return Err(Error::Format(format!(
                "rank {} does not fit a rank-4 tensor",
                self.dims.len()
            )));
        }
        let mut dims = [1usize; 4];
        let off = 4 - self.dims.len();
        dims[off..].copy_from_slice(&self.dims);
        let values: Vec<T> = match &self.data {
            TsrData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            TsrData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
            TsrData::I32(_) => {
                return Err(Error::Format("expected a real-valued tensor, found i32".into()))
            }
        };
        Tensor4::from_vec(dims, values)
    }

    pub fn to_matrix<T: Scalar>(&self) -> Result<Matrix<T>> {
        if self.dims.len() != 2 {
            return Err(Error::Format(format!("expected rank 2, found {}", self.dims.len())));
        }
        let t = self.to_tensor::<T>()?;
        Matrix::from_vec(self.dims[0], self.dims[1], t.into_vec())
    }

    pub fn encode(&self) -> Vec<u8> {
        let width = self.data.dtype().width();
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + width * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(self.data.dtype() as u8);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TsrData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TsrData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TsrData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing TSR1 magic".into()));
        }
        let dtype = DType::from_code(bytes[4])
            .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[4])))?;
        let ndim = bytes[5] as usize;
        let header = 6 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::Format("truncated TSR header".into()));
        }
        let dims: Vec<usize> = bytes[6..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let n: usize = dims.iter().product();
        let payload = &bytes[header..];
        if payload.len() != n * dtype.width() {
            return Err(Error::Format(format!(
                "payload is {} bytes, dims {:?} need {}",
                payload.len(),
                dims,
                n * dtype.width()
            )));
        }
        let data = match dtype {
            DType::F32 => TsrData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::F64 => TsrData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DType::I32 => TsrData::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        };
        Ok(TsrArray { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn scalars_to_data<T: Scalar>(values: &[T]) -> TsrData {
    match T::DTYPE {
        DType::F32 => TsrData::F32(values.iter().map(|x| x.to_f32().expect("f32")).collect()),
        _ => TsrData::F64(values.iter().map(|x| x.as_f64()).collect()),
    }
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor4<T>) -> Result<()> {
    TsrArray::from_tensor(t).write(path)
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor4<T>> {
    TsrArray::read(path)?.to_tensor()
}
