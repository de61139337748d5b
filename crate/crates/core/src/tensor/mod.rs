//! Dense row-major tensors, f32 kernels and the SWTA archive format.

pub mod archive;
pub mod ops;

use half::f16;

use crate::error::{Error, Result};
use crate::quant::QuantParams;

pub use archive::TensorArchive;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
    I8,
    U8,
    I32,
}

impl DType {
    pub fn id(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::I8 => 2,
            DType::U8 => 3,
            DType::I32 => 4,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            2 => Some(DType::I8),
            3 => Some(DType::U8),
            4 => Some(DType::I32),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F16 => 2,
            DType::I8 | DType::U8 => 1,
        }
    }

    pub fn is_quantized(self) -> bool {
        matches!(self, DType::I8 | DType::U8)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<f16>),
    I8(Vec<i8>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F16(_) => DType::F16,
            TensorData::I8(_) => DType::I8,
            TensorData::U8(_) => DType::U8,
            TensorData::I32(_) => DType::I32,
        }
    }
}

/// An n-dimensional array. Quantized dtypes always carry [`QuantParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
    qparams: Option<QuantParams>,
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::dim(format!("extent {pos} of shape {shape:?} is zero")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::dim(format!("shape {shape:?} overflows")))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData, qparams: Option<QuantParams>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        if data.dtype().is_quantized() && qparams.is_none() {
            return Err(Error::InvalidArgument(
                "i8/u8 tensors require quantization parameters".into(),
            ));
        }
        if let Some(qp) = &qparams {
            qp.validate()?;
        }
        Ok(Tensor {
            shape,
            data,
            qparams,
        })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data), None)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        Self::from_f32(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Result<Self> {
        let n = checked_numel(&shape)?;
        Self::from_f32(shape, vec![value; n])
    }

    /// Round f32 values to half precision (nearest-even).
    pub fn from_f32_as_f16(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        let h = data.iter().map(|&v| f16::from_f32(v)).collect();
        Self::new(shape, TensorData::F16(h), None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn qparams(&self) -> Option<&QuantParams> {
        self.qparams.as_ref()
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::InvalidArgument(format!(
                "expected f32 tensor, got {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32]> {
        match &mut self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::InvalidArgument(format!(
                "expected f32 tensor, got {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::InvalidArgument(format!(
                "expected f32 tensor, got {:?}",
                other.dtype()
            ))),
        }
    }

    /// Widen float storage to f32. f16 → f32 is exact.
    pub fn to_f32_vec(&self) -> Result<Vec<f32>> {
        match &self.data {
            TensorData::F32(v) => Ok(v.clone()),
            TensorData::F16(v) => Ok(v.iter().map(|h| h.to_f32()).collect()),
            other => Err(Error::InvalidArgument(format!(
                "cannot widen {:?} without dequantization",
                other.dtype()
            ))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        if n != self.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Byte length of the raw element payload.
    pub fn payload_bytes(&self) -> usize {
        self.numel() * self.dtype().size_of()
    }
}

/// Round every value through half precision and back.
pub fn round_to_f16(x: &mut [f32]) {
    for v in x {
        *v = f16::from_f32(*v).to_f32();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::from_f32(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_f32(vec![2, 0], vec![]).is_err());
        let t = Tensor::from_f32(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.ndim(), 2);
    }

    #[test]
    fn quantized_dtypes_require_qparams() {
        let r = Tensor::new(vec![2], TensorData::I8(vec![1, 2]), None);
        assert!(r.is_err());
        let qp = QuantParams::symmetric(8, 0.5).unwrap();
        assert!(Tensor::new(vec![2], TensorData::I8(vec![1, 2]), Some(qp)).is_ok());
    }

    #[test]
    fn f16_storage_rounds_nearest_even() {
        // 2049 is halfway between the f16 neighbours 2048 and 2050.
        let t = Tensor::from_f32_as_f16(vec![3], &[2049.0, 2051.0, 0.1]).unwrap();
        let v = t.to_f32_vec().unwrap();
        assert_eq!(v[0], 2048.0);
        assert_eq!(v[1], 2052.0);
        assert!((v[2] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn reshape_preserves_count() {
        let t = Tensor::zeros(vec![4, 6]).unwrap();
        let t = t.reshape(vec![2, 12]).unwrap();
        assert_eq!(t.shape(), &[2, 12]);
        assert!(t.reshape(vec![5, 5]).is_err());
    }
}
