//! SWTA tensor archive.
//!
//! ```text
//! "SWTA" | u32 version=1 | u32 count
//! per tensor:
//!   u16 name_len | name (utf-8) | u8 dtype | u8 ndim | ndim x u32 dims
//!   u8 has_qparams | [f32 scale | i32 zero_point | u8 bits | u8 scheme]
//!   raw element bytes
//! ```
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::path::Path;

use half::f16;

use crate::error::{Error, Result};
use crate::quant::{QuantParams, Scheme};
use crate::tensor::{DType, Tensor, TensorData};

pub const MAGIC: [u8; 4] = *b"SWTA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    entries: Vec<(String, Tensor)>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut archive = Self::new();
        for (name, tensor) in entries {
            archive.push(name, tensor)?;
        }
        Ok(archive)
    }

    /// Append an entry; names must be unique.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("tensor name too long: {name}")));
        }
        if tensor.ndim() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!("{name}: too many dimensions")));
        }
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate tensor name {name}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            12 + self
                .entries
                .iter()
                .map(|(n, t)| n.len() + 32 + t.payload_bytes())
                .sum::<usize>(),
        );
        self.write_into(&mut out);
        out
    }

    pub fn write_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().id());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match t.qparams() {
                None => out.push(0),
                Some(qp) => {
                    out.push(1);
                    out.extend_from_slice(&qp.scale.to_le_bytes());
                    out.extend_from_slice(&qp.zero_point.to_le_bytes());
                    out.push(qp.bits);
                    out.push(qp.scheme.id());
                }
            }
            match t.data() {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes())),
                TensorData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
                TensorData::U8(v) => out.extend_from_slice(v),
                TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
    }

    /// Parse a complete archive; trailing bytes are an error.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (archive, used) = Self::read_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::format(used, format!("{} trailing bytes", bytes.len() - used)));
        }
        Ok(archive)
    }

    /// Parse an archive at the start of `bytes`, returning it and the byte count consumed.
    pub fn read_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:02x?}")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let entry_start = r.pos;
            let name_len = r.u16()? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::format(name_at, format!("name is not utf-8: {e}")))?
                .to_owned();
            if !seen.insert(name.clone()) {
                return Err(Error::format(entry_start, format!("duplicate tensor name {name}")));
            }
            let dtype_at = r.pos;
            let dtype = DType::from_id(r.u8()?)
                .ok_or_else(|| Error::format(dtype_at, "unknown dtype"))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let q_at = r.pos;
            let qparams = match r.u8()? {
                0 => None,
                1 => {
                    let scale = f32::from_le_bytes(r.array()?);
                    let zero_point = i32::from_le_bytes(r.array()?);
                    let bits = r.u8()?;
                    let scheme_at = r.pos;
                    let scheme = Scheme::from_id(r.u8()?)
                        .ok_or_else(|| Error::format(scheme_at, "unknown quantization scheme"))?;
                    Some(QuantParams {
                        scheme,
                        bits,
                        scale,
                        zero_point,
                    })
                }
                other => return Err(Error::format(q_at, format!("bad has_qparams flag {other}"))),
            };
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format(dtype_at, "shape overflows"))?;
            let data_at = r.pos;
            let raw = r.take(
                numel
                    .checked_mul(dtype.size_of())
                    .ok_or_else(|| Error::format(data_at, "payload size overflows"))?,
            )?;
            let data = decode_payload(dtype, raw);
            let tensor = Tensor::new(shape, data, qparams)
                .map_err(|e| Error::format(entry_start, format!("tensor {name}: {e}")))?;
            entries.push((name, tensor));
        }
        Ok((TensorArchive { entries }, r.pos))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn decode_payload(dtype: DType, raw: &[u8]) -> TensorData {
    match dtype {
        DType::F32 => TensorData::F32(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F16 => TensorData::F16(
            raw.chunks_exact(2)
                .map(|c| f16::from_bits(u16::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        ),
        DType::I8 => TensorData::I8(raw.iter().map(|&b| b as i8).collect()),
        DType::U8 => TensorData::U8(raw.to_vec()),
        DType::I32 => TensorData::I32(
            raw.chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos,
                    format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_archive_is_header_only() {
        let bytes = TensorArchive::new().to_bytes();
        assert_eq!(bytes, [b'S', b'W', b'T', b'A', 1, 0, 0, 0, 0, 0, 0, 0]);
        assert!(TensorArchive::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn single_f32_tensor_layout() {
        let t = Tensor::from_f32(vec![2, 2], vec![1.0, -2.0, 0.5, 3.25]).unwrap();
        let a = TensorArchive::from_entries(vec![("w".into(), t)]).unwrap();
        let bytes = a.to_bytes();
        // header 12 + name_len 2 + name 1 + dtype 1 + ndim 1 + dims 8 + has_q 1
        let payload_at = 12 + 2 + 1 + 1 + 1 + 8 + 1;
        assert_eq!(bytes.len(), payload_at + 16);
        assert_eq!(&bytes[payload_at..payload_at + 4], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[bytes.len() - 4..], &3.25f32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::from_f32(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let a = TensorArchive::from_entries(vec![("x".into(), t)]).unwrap();
        let mut bytes = a.to_bytes();
        let err = TensorArchive::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        bytes[0] = b'X';
        assert!(matches!(
            TensorArchive::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn rejects_duplicate_names() {
        let t = Tensor::zeros(vec![1]).unwrap();
        let mut a = TensorArchive::new();
        a.push("dup", t.clone()).unwrap();
        assert!(a.push("dup", t.clone()).is_err());

        // Hand-build a file with two identical entries.
        let single = TensorArchive::from_entries(vec![("dup".into(), t)]).unwrap().to_bytes();
        let entry = &single[12..];
        let mut bytes = single[..8].to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(entry);
        bytes.extend_from_slice(entry);
        let err = TensorArchive::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == 12 + entry.len()));
    }

    #[test]
    fn quantized_tensor_round_trip() {
        let qp = QuantParams::affine(8, 0.02, 128).unwrap();
        let t = Tensor::new(vec![2, 2], TensorData::U8(vec![0, 128, 200, 255]), Some(qp)).unwrap();
        let a = TensorArchive::from_entries(vec![("q".into(), t)]).unwrap();
        let back = TensorArchive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back, a);
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        let shape = proptest::collection::vec(1usize..5, 0..4);
        (shape, 0u8..5, any::<u64>()).prop_map(|(shape, dtype, seed)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n: usize = shape.iter().product();
            let (data, qp) = match dtype {
                0 => (TensorData::F32((0..n).map(|_| rng.random::<f32>() - 0.5).collect()), None),
                1 => (TensorData::F16((0..n).map(|_| f16::from_f32(rng.random())).collect()), None),
                2 => (
                    TensorData::I8((0..n).map(|_| rng.random()).collect()),
                    Some(QuantParams::symmetric(8, 0.01).unwrap()),
                ),
                3 => (
                    TensorData::U8((0..n).map(|_| rng.random()).collect()),
                    Some(QuantParams::affine(8, 0.5, 7).unwrap()),
                ),
                _ => (TensorData::I32((0..n).map(|_| rng.random()).collect()), None),
            };
            Tensor::new(shape, data, qp).unwrap()
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_identical(tensors in proptest::collection::vec(arb_tensor(), 0..10)) {
            let entries = tensors.into_iter().enumerate().map(|(i, t)| (format!("t{i}"), t)).collect();
            let a = TensorArchive::from_entries(entries).unwrap();
            let bytes = a.to_bytes();
            let back = TensorArchive::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, a);
        }
    }
}
