//! Versioned little-endian file formats. Encoders write into byte buffers or
//! any `Write`; decoders read from byte slices or any `Read`. Nothing here
//! touches the filesystem.
//!
//! Layouts are documented in `docs/formats.md`.

mod containers;
mod report;

pub use containers::{
    decode_checkpoint, decode_codebook, decode_rvq, decode_targets, encode_checkpoint, encode_codebook, encode_rvq,
    encode_targets, Checkpoint,
};
pub use report::Report;

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"MTL1";
pub const TENSOR_VERSION: u32 = 1;

pub const DTYPE_F32: u8 = 0;
pub const DTYPE_F64: u8 = 1;
pub const DTYPE_U32: u8 = 2;

/// Append-only little-endian encoder.
#[derive(Default)]
pub struct Enc(pub Vec<u8>);

impl Enc {
    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }

    /// u32 byte length followed by UTF-8.
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

/// Cursor over a byte slice; every read checks bounds.
pub struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated: need {n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    pub fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    pub fn version(&mut self, want: u32, what: &str) -> Result<()> {
        let v = self.u32()?;
        if v != want {
            return Err(Error::Format(format!("{what} version {v} not supported (expected {want})")));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Payload of a tensor file.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U32 { shape: Vec<usize>, data: Vec<u32> },
}

impl TensorData {
    pub fn from_real<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DTYPE_F32 => TensorData::F32(t.cast()),
            _ => TensorData::F64(t.cast()),
        }
    }

    /// Convert back to a float tensor of type `T`; the stored dtype must match.
    pub fn into_real<T: Real>(self) -> Result<Tensor<T>> {
        match (self, T::DTYPE) {
            (TensorData::F32(t), DTYPE_F32) => Ok(t.cast()),
            (TensorData::F64(t), DTYPE_F64) => Ok(t.cast()),
            (other, _) => Err(Error::Format(format!("dtype {} where code {} was expected", other.dtype(), T::DTYPE))),
        }
    }

    pub fn u32_vec(shape: Vec<usize>, data: Vec<u32>) -> Self {
        TensorData::U32 { shape, data }
    }

    pub fn into_u32(self) -> Result<(Vec<usize>, Vec<u32>)> {
        match self {
            TensorData::U32 { shape, data } => Ok((shape, data)),
            other => Err(Error::Format(format!("dtype {} where u32 was expected", other.dtype()))),
        }
    }

    pub fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => DTYPE_F32,
            TensorData::F64(_) => DTYPE_F64,
            TensorData::U32 { .. } => DTYPE_U32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
            TensorData::U32 { shape, .. } => shape,
        }
    }
}

/// Append one tensor file (magic, version, dtype, dims, payload, CRC32).
pub fn encode_tensor(t: &TensorData, e: &mut Enc) {
    e.bytes(TENSOR_MAGIC);
    e.u32(TENSOR_VERSION);
    e.u8(t.dtype());
    let shape = t.shape();
    e.u8(shape.len() as u8);
    for &d in shape {
        e.u64(d as u64);
    }
    let mut payload = Vec::new();
    match t {
        TensorData::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut payload)),
        TensorData::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut payload)),
        TensorData::U32 { data, .. } => data.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
    }
    e.bytes(&payload);
    e.u32(crc32fast::hash(&payload));
}

pub fn decode_tensor(d: &mut Dec<'_>) -> Result<TensorData> {
    d.magic(TENSOR_MAGIC)?;
    d.version(TENSOR_VERSION, "tensor file")?;
    let dtype = d.u8()?;
    let ndim = d.u8()? as usize;
    let shape = (0..ndim).map(|_| d.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| Error::Format("dims overflow".into()))?;
    let width = match dtype {
        DTYPE_F32 | DTYPE_U32 => 4,
        DTYPE_F64 => 8,
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    let bytes = n.checked_mul(width).ok_or_else(|| Error::Format("payload size overflow".into()))?;
    let payload = d.take(bytes)?;
    let crc = d.u32()?;
    if crc != crc32fast::hash(payload) {
        return Err(Error::Format("tensor payload CRC mismatch".into()));
    }
    Ok(match dtype {
        DTYPE_F32 => TensorData::F32(Tensor::new(shape, payload.chunks_exact(4).map(f32::read_le).collect())?),
        DTYPE_F64 => TensorData::F64(Tensor::new(shape, payload.chunks_exact(8).map(f64::read_le).collect())?),
        _ => TensorData::U32 { shape, data: payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect() },
    })
}

pub fn write_tensor<W: Write>(w: &mut W, t: &TensorData) -> Result<()> {
    let mut e = Enc::default();
    encode_tensor(t, &mut e);
    w.write_all(&e.0)?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<TensorData> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut d = Dec::new(&buf);
    let t = decode_tensor(&mut d)?;
    d.finish()?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(t: &TensorData) -> Vec<u8> {
        let mut a = Vec::new();
        write_tensor(&mut a, t).unwrap();
        let back = read_tensor(&mut a.as_slice()).unwrap();
        assert_eq!(&back, t);
        let mut b = Vec::new();
        write_tensor(&mut b, &back).unwrap();
        assert_eq!(a, b);
        a
    }

    #[test]
    fn all_dtypes_roundtrip() {
        roundtrip(&TensorData::F32(Tensor::matrix(2, 2, vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25]).unwrap()));
        roundtrip(&TensorData::F64(Tensor::new(vec![3], vec![0.1, -1e300, 7.0]).unwrap()));
        roundtrip(&TensorData::U32 { shape: vec![0], data: vec![] });
        let bytes = roundtrip(&TensorData::U32 { shape: vec![2, 1], data: vec![7, u32::MAX] });
        assert_eq!(&bytes[..4], b"MTL1");
        assert_eq!(bytes.len(), 4 + 4 + 1 + 1 + 16 + 8 + 4);
    }

    #[test]
    fn corruption_is_detected() {
        let mut a = Vec::new();
        write_tensor(&mut a, &TensorData::U32 { shape: vec![2], data: vec![1, 2] }).unwrap();
        let mut bad = a.clone();
        let n = bad.len();
        bad[n - 6] ^= 1;
        assert!(read_tensor(&mut bad.as_slice()).is_err());
        let mut bad = a.clone();
        bad[4] = 9;
        assert!(matches!(read_tensor(&mut bad.as_slice()), Err(Error::Format(m)) if m.contains("version")));
        assert!(read_tensor(&mut &a[..a.len() - 1]).is_err());
    }
}
