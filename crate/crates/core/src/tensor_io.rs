//! AXT tensor files.
//!
//! Layout (all little-endian):
//!
//! | bytes      | field                                          |
//! |------------|------------------------------------------------|
//! | 4          | magic `AXT1`                                   |
//! | 4          | `u32` rank                                     |
//! | 8 × rank   | `u64` dims                                     |
//! | 1          | dtype: 1=f32, 2=f64, 3=i32, 4=i8               |
//! | rest       | row-major payload                              |

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{QuantError, Result};

pub const MAGIC: [u8; 4] = *b"AXT1";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    I8(Vec<i8>),
}

impl TensorData {
    pub fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::F64(_) => 2,
            TensorData::I32(_) => 3,
            TensorData::I8(_) => 4,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn elem_size(code: u8) -> Option<usize> {
        match code {
            1 => Some(4),
            2 => Some(8),
            3 => Some(4),
            4 => Some(1),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (r, c) = m.shape();
        Self {
            dims: vec![r as u64, c as u64],
            data: TensorData::F64(row_major(m)),
        }
    }

    /// Integer codes as an `i32` tensor.
    pub fn from_codes(m: &DMatrix<i64>) -> Result<Self> {
        let (r, c) = m.shape();
        let data = row_major(m)
            .into_iter()
            .map(|v| {
                i32::try_from(v).map_err(|_| {
                    QuantError::InvalidArgument(format!("code {v} does not fit in i32"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dims: vec![r as u64, c as u64],
            data: TensorData::I32(data),
        })
    }

    fn matrix_shape(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r as usize, *c as usize)),
            [n] => Ok((*n as usize, 1)),
            other => Err(QuantError::Shape(format!(
                "expected a rank-1 or rank-2 tensor, got dims {other:?}"
            ))),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let (r, c) = self.matrix_shape()?;
        let flat: Vec<f64> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I8(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Ok(DMatrix::from_row_slice(r, c, &flat))
    }

    pub fn to_codes(&self) -> Result<DMatrix<i64>> {
        let (r, c) = self.matrix_shape()?;
        let flat: Vec<i64> = match &self.data {
            TensorData::I32(v) => v.iter().map(|&x| x as i64).collect(),
            TensorData::I8(v) => v.iter().map(|&x| x as i64).collect(),
            _ => {
                return Err(QuantError::InvalidArgument(
                    "integer codes must be stored as i32 or i8".into(),
                ))
            }
        };
        Ok(DMatrix::from_row_slice(r, c, &flat))
    }
}

fn row_major<T: nalgebra::Scalar + Copy>(m: &DMatrix<T>) -> Vec<T> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let count: u64 = t.dims.iter().product();
    if count as usize != t.data.len() {
        return Err(QuantError::Shape(format!(
            "dims {:?} hold {count} elements but payload has {}",
            t.dims,
            t.data.len()
        )));
    }
    let mut out = Vec::with_capacity(9 + 8 * t.dims.len() + t.data.len() * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for d in &t.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(t.data.dtype_code());
    match &t.data {
        TensorData::F32(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::I32(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::I8(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

/// Parses an AXT buffer; `path` only labels diagnostics.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let truncated = |detail: String| QuantError::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 {
        return Err(truncated(format!(
            "{} bytes, no room for magic",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(QuantError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let mut pos = 4;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if bytes.len() < pos + n {
            return Err(truncated(format!("missing {what}")));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let rank = u32::from_le_bytes(take(4, "rank")?.try_into().unwrap()) as usize;
    let mut dims = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        dims.push(u64::from_le_bytes(take(8, "dims")?.try_into().unwrap()));
    }
    let code = take(1, "dtype")?[0];
    let elem = TensorData::elem_size(code).ok_or_else(|| QuantError::BadDtype {
        path: path.to_path_buf(),
        code,
    })?;
    let count = dims
        .iter()
        .try_fold(1u64, |acc, d| acc.checked_mul(*d))
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| QuantError::Shape(format!("dims {dims:?} overflow")))?;
    let need = count
        .checked_mul(elem)
        .ok_or_else(|| QuantError::Shape(format!("dims {dims:?} overflow")))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(truncated(format!(
            "payload has {} bytes, dims {dims:?} need {need}",
            payload.len()
        )));
    }
    if payload.len() > need {
        return Err(QuantError::Shape(format!(
            "{} trailing bytes after payload",
            payload.len() - need
        )));
    }
    let data = match code {
        1 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        2 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        3 => TensorData::I32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        _ => TensorData::I8(payload.iter().map(|&b| b as i8).collect()),
    };
    Ok(Tensor { dims, data })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| QuantError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, path)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)?).map_err(|source| QuantError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    read_tensor(path)?.to_matrix()
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    write_tensor(path, &Tensor::from_matrix(m))
}

pub fn read_codes(path: impl AsRef<Path>) -> Result<DMatrix<i64>> {
    read_tensor(path)?.to_codes()
}

pub fn write_codes(path: impl AsRef<Path>, m: &DMatrix<i64>) -> Result<()> {
    write_tensor(path, &Tensor::from_codes(m)?)
}
