//! `AGT1` tensor records.
//!
//! Layout: magic `AGT1`, `u8` dtype code (0 = f32, 1 = f64), `u8` ndim,
//! `ndim` little-endian `u32` extents, then the values little-endian in
//! row-major order.

use std::io::{Read, Write};

use super::{DType, Result, Scalar, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"AGT1";

/// A record read without knowing its element type up front.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, rounding if narrowing.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    /// Returns the tensor only if it is stored as `T`.
    pub fn exact<T: Scalar>(self) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(TensorError::DType { expected: T::DTYPE, found: self.dtype() });
        }
        Ok(self.cast())
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    let ndim = u8::try_from(t.ndim()).map_err(|_| TensorError::Format(format!("{} dimensions exceed 255", t.ndim())))?;
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(ndim);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| TensorError::Format(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode(t, &mut buf)?;
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            TensorError::Format(format!("truncated {what}"))
        } else {
            TensorError::Io(e)
        }
    })
}

pub fn read_any<R: Read>(r: &mut R) -> Result<AnyTensor> {
    let mut head = [0u8; 6];
    read_exact(r, &mut head, "header")?;
    if &head[..4] != MAGIC {
        return Err(TensorError::Format(format!("bad magic bytes {:?}", &head[..4])));
    }
    let dtype = DType::from_code(head[4]).ok_or_else(|| TensorError::Format(format!("unknown dtype code {}", head[4])))?;
    let ndim = head[5] as usize;
    let mut dims = vec![0u8; 4 * ndim];
    read_exact(r, &mut dims, "shape")?;
    let shape: Vec<usize> = dims.chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let numel = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e)).ok_or_else(|| TensorError::Format("extent overflow".into()))?;
    let nbytes = numel.checked_mul(dtype.size()).ok_or_else(|| TensorError::Format("extent overflow".into()))?;
    // Avoid trusting a corrupted header with a huge allocation up front.
    let mut raw = Vec::with_capacity(nbytes.min(1 << 26));
    r.take(nbytes as u64).read_to_end(&mut raw)?;
    if raw.len() != nbytes {
        return Err(TensorError::Format(format!("truncated data: expected {nbytes} bytes, found {}", raw.len())));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_values(shape, &raw)?),
        DType::F64 => AnyTensor::F64(decode_values(shape, &raw)?),
    })
}

fn decode_values<T: Scalar>(shape: Vec<usize>, raw: &[u8]) -> Result<Tensor<T>> {
    let data = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    read_any(r)?.exact()
}

pub fn save<T: Scalar>(path: impl AsRef<std::path::Path>, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode(t, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_any(path: impl AsRef<std::path::Path>) -> Result<AnyTensor> {
    let bytes = std::fs::read(path)?;
    let mut cursor = bytes.as_slice();
    let t = read_any(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(TensorError::Format(format!("{} trailing bytes", cursor.len())));
    }
    Ok(t)
}
