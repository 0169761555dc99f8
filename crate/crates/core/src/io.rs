//! Binary tensor files (`.botk`) and named parameter archives.
//!
//! Tensor layout: magic `BOTK`, u8 version (1), u8 dtype code (1 = f32,
//! 2 = f64), u8 rank, rank little-endian u64 extents, then the packed
//! little-endian values.
//!
//! Archive layout: magic `BOTP`, u8 version (1), u32 LE record count, then
//! per record a u16 LE name length, the UTF-8 name, and one tensor blob.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"BOTK";
const ARCHIVE_MAGIC: &[u8; 4] = b"BOTP";
const VERSION: u8 = 1;

/// A tensor of either element type, as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::Float32,
            AnyTensor::F64(_) => DType::Float64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested element type (exact when it already matches).
    pub fn into_dtype<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * t.rank() + t.numel() * T::DTYPE.size_of());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated input: {e}")))?;
    Ok(buf)
}

fn read_values<T: Scalar, R: Read>(r: &mut R, shape: &[usize]) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    let size = T::DTYPE.size_of();
    let raw = read_exact(r, numel * size)?;
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<AnyTensor> {
    let head = read_exact(r, 7)?;
    if &head[..4] != TENSOR_MAGIC {
        return Err(Error::Format("bad magic, expected BOTK".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", head[4])));
    }
    let dtype = DType::from_code(head[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", head[5])))?;
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = read_exact(r, 8)?;
        let d = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large")))?);
    }
    Ok(match dtype {
        DType::Float32 => AnyTensor::F32(read_values(r, &shape)?),
        DType::Float64 => AnyTensor::F64(read_values(r, &shape)?),
    })
}

pub fn decode_tensor(bytes: &[u8]) -> Result<AnyTensor> {
    let mut cur = bytes;
    let t = read_tensor(&mut cur)?;
    if !cur.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", cur.len())));
    }
    Ok(t)
}

pub fn save_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<AnyTensor> {
    decode_tensor(&std::fs::read(path)?)
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamArchive<T: Scalar> {
    records: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamArchive<T> {
    fn default() -> Self {
        Self { records: Vec::new() }
    }
}

impl<T: Scalar> ParamArchive<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.records.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .cloned()
            .ok_or_else(|| Error::Parameter(format!("missing parameter record {name:?}")))
    }

    pub fn records(&self) -> &[(String, Tensor<T>)] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Total scalar count over all records.
    pub fn numel(&self) -> usize {
        self.records.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend(encode_tensor(t));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let head = read_exact(&mut r, 9)?;
        if &head[..4] != ARCHIVE_MAGIC {
            return Err(Error::Format("bad magic, expected BOTP".into()));
        }
        if head[4] != VERSION {
            return Err(Error::Format(format!("unsupported archive version {}", head[4])));
        }
        let count = u32::from_le_bytes(head[5..9].try_into().expect("4 bytes"));
        let mut archive = Self::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(read_exact(&mut r, 2)?.try_into().expect("2 bytes"));
            let name = String::from_utf8(read_exact(&mut r, len as usize)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let t = read_tensor(&mut r)?.into_dtype::<T>();
            archive.push(name, t);
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..7], b"BOTK\x01\x01\x02");
        assert_eq!(&b[7..15], &2u64.to_le_bytes());
        assert_eq!(&b[23..27], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 7 + 16 + 8);
    }

    #[test]
    fn rejects_corrupt_input() {
        let t = Tensor::<f64>::ones(&[3]);
        let mut b = encode_tensor(&t);
        assert!(decode_tensor(&b[..b.len() - 1]).is_err());
        b[5] = 9;
        assert!(decode_tensor(&b).is_err());
        assert!(decode_tensor(b"NOPE\x01\x01\x00").is_err());
    }

    #[test]
    fn archive_roundtrip() {
        let mut a = ParamArchive::<f64>::new();
        a.push("c5.0.mhsa.wq", Tensor::eye(2));
        a.push("c5.0.mhsa.r_h", Tensor::full(&[3, 2], 0.5));
        let back = ParamArchive::<f64>::decode(&a.encode()).unwrap();
        assert_eq!(back, a);
        assert!(back.take("missing").is_err());
    }

    proptest! {
        #[test]
        fn f64_roundtrip_bit_exact(shape in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let mut s = seed;
            let t = Tensor::<f64>::from_fn(&shape, |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(s >> 2)
            });
            let back = decode_tensor(&encode_tensor(&t)).unwrap();
            match back {
                AnyTensor::F64(b) => {
                    prop_assert_eq!(b.shape(), t.shape());
                    for (x, y) in b.data().iter().zip(t.data()) {
                        prop_assert_eq!(x.to_bits(), y.to_bits());
                    }
                }
                _ => prop_assert!(false, "dtype changed"),
            }
        }

        #[test]
        fn f32_roundtrip_bit_exact(vals in prop::collection::vec(any::<f32>(), 1..20)) {
            let t = Tensor::<f32>::new(&[vals.len()], vals).unwrap();
            let bytes = encode_tensor(&t);
            let again = match decode_tensor(&bytes).unwrap() {
                AnyTensor::F32(b) => encode_tensor(&b),
                _ => unreachable!(),
            };
            prop_assert_eq!(bytes, again);
        }
    }
}
