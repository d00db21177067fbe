//! Binary tensor files.
//!
//! Layout: `b"TNSR"`, version `0x01`, dtype byte (0 = f64, 1 = f32), rank
//! byte, `rank` little-endian `u64` extents, then row-major little-endian
//! scalars.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u8 = 0x01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64 = 0,
    F32 = 1,
}

impl Dtype {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            other => Err(Error::Format(format!("unknown dtype byte {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

/// A tensor read from disk in its stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F64(Tensor<f64>),
    F32(Tensor<f32>),
}

impl AnyTensor {
    pub fn into_f64(self) -> Tensor<f64> {
        match self {
            AnyTensor::F64(t) => t,
            AnyTensor::F32(t) => t.cast(),
        }
    }
}

pub fn write_tensor<T: Real, W: Write>(out: &mut W, tensor: &Tensor<T>) -> std::io::Result<()> {
    let rank = u8::try_from(tensor.ndim())
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank above 255"))?;
    let mut buf = Vec::with_capacity(8 + 8 * tensor.ndim() + T::DTYPE.width() * tensor.len());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(T::DTYPE as u8);
    buf.push(rank);
    for &e in tensor.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<AnyTensor> {
    let fail = |e: std::io::Error| Error::Format(format!("truncated tensor stream: {e}"));
    let mut head = [0u8; 7];
    input.read_exact(&mut head).map_err(fail)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected TNSR".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", head[4])));
    }
    let dtype = Dtype::from_byte(head[5])?;
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        input.read_exact(&mut b).map_err(fail)?;
        shape.push(
            usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("extent does not fit in usize".into()))?,
        );
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let mut raw = vec![0u8; n * dtype.width()];
    input.read_exact(&mut raw).map_err(fail)?;
    Ok(match dtype {
        Dtype::F64 => AnyTensor::F64(Tensor::new(shape, decode(&raw))?),
        Dtype::F32 => AnyTensor::F32(Tensor::new(shape, decode(&raw))?),
    })
}

fn decode<T: Real>(raw: &[u8]) -> Vec<T> {
    raw.chunks_exact(T::DTYPE.width()).map(T::read_le).collect()
}

pub fn write_tensor_file<T: Real>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor(&mut w, tensor).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_header_bytes() {
        let t = Tensor::new(vec![1, 2], vec![1.0f64, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expected = b"TNSR".to_vec();
        expected.extend([1, 0, 2]);
        expected.extend(1u64.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        expected.extend((-2.0f64).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), AnyTensor::F64(t));
    }

    #[test]
    fn single_precision_dtype_byte() {
        let t = Tensor::new(vec![3], vec![0.5f32, 1.5, -3.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(buf[5], 1);
        assert_eq!(buf.len(), 7 + 8 + 12);
        assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), AnyTensor::F32(t));
    }

    #[test]
    fn rejects_corrupt_streams() {
        assert!(matches!(read_tensor(&mut &b"TNSX\x01\x00\x01"[..]), Err(Error::Format(_))));
        assert!(matches!(read_tensor(&mut &b"TNSR\x02\x00\x01"[..]), Err(Error::Format(_))));
        assert!(matches!(read_tensor(&mut &b"TNSR\x01\x07\x01"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::full(vec![4], 1.0f64)).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
