//! Dense row-major tensor container used throughout the pipeline.

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]. Arithmetic kernels operate on `F32`;
/// `U8`/`I32` exist for serialized images, labels and quantized values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
    I32,
}

impl Dtype {
    /// Stable on-disk code (see the XTEN container).
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::U8 => 1,
            Dtype::I32 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::U8),
            2 => Some(Dtype::I32),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

/// Dense n-dimensional array, row-major.
///
/// The element count always equals the product of the dims; constructors
/// panic on violation since that is a programming error, while everything
/// read from disk is validated with proper errors before construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn check_len(shape: &[usize], len: usize) {
    let numel: usize = shape.iter().product();
    assert!(
        numel == len && shape.iter().all(|&d| d > 0),
        "shape {:?} (numel {}) does not match data length {}",
        shape,
        numel,
        len
    );
}

impl Tensor {
    pub fn from_f32(shape: &[usize], data: Vec<f32>) -> Tensor {
        check_len(shape, data.len());
        Tensor {
            shape: shape.to_vec(),
            data: TensorData::F32(data),
        }
    }

    pub fn from_u8(shape: &[usize], data: Vec<u8>) -> Tensor {
        check_len(shape, data.len());
        Tensor {
            shape: shape.to_vec(),
            data: TensorData::U8(data),
        }
    }

    pub fn from_i32(shape: &[usize], data: Vec<i32>) -> Tensor {
        check_len(shape, data.len());
        Tensor {
            shape: shape.to_vec(),
            data: TensorData::I32(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_f32(shape, vec![0.0; numel])
    }

    pub fn filled(shape: &[usize], value: f32) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_f32(shape, vec![value; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match &self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::U8(_) => Dtype::U8,
            TensorData::I32(_) => Dtype::I32,
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(Error::DtypeMismatch(format!(
                "expected f32 tensor, got {:?}",
                self.dtype()
            ))),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32]> {
        let dtype = self.dtype();
        match &mut self.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(Error::DtypeMismatch(format!(
                "expected f32 tensor, got {dtype:?}"
            ))),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            _ => Err(Error::DtypeMismatch(format!(
                "expected u8 tensor, got {:?}",
                self.dtype()
            ))),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Ok(v),
            _ => Err(Error::DtypeMismatch(format!(
                "expected i32 tensor, got {:?}",
                self.dtype()
            ))),
        }
    }

    /// Elements widened to f64 regardless of dtype, in row-major order.
    pub fn iter_f64(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match &self.data {
            TensorData::F32(v) => Box::new(v.iter().map(|&x| x as f64)),
            TensorData::U8(v) => Box::new(v.iter().map(|&x| x as f64)),
            TensorData::I32(v) => Box::new(v.iter().map(|&x| x as f64)),
        }
    }

    /// View as `(N, C, H, W)`.
    pub fn dim4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// View as `(rows, cols)`.
    pub fn dim2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        let mut out = self.clone();
        out.shape = shape.to_vec();
        Ok(out)
    }

    /// Total payload size when serialized.
    pub fn byte_len(&self) -> usize {
        self.len() * self.dtype().size_bytes()
    }

    pub fn all_finite(&self) -> bool {
        match &self.data {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            _ => true,
        }
    }
}
