//! Dense row-major tensors and the numeric kernels every other module runs on.
//!
//! All float kernels accumulate in f32 with strictly sequential inner loops,
//! so identical inputs always give bit-identical outputs.

mod ops;
pub mod qtns;

pub use ops::{
    activation, concat_rows, conv2d, conv2d_f32, conv2d_int, cosine_similarity, elementwise,
    histogram, matmul, matmul_f32, matmul_int, psnr, scale, silu, sigmoid, ActKind, BinaryOp,
    Conv2dGeom, Histogram, PSNR_CAP_DB,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    I8,
    I16,
    I32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I8 => 1,
            DType::I16 => 2,
            DType::I32 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => DType::F32,
            1 => DType::I8,
            2 => DType::I16,
            3 => DType::I32,
            c => return Err(Error::Format(format!("unknown dtype code {c}"))),
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::I8 => 1,
            DType::I16 => 2,
            DType::F32 | DType::I32 => 4,
        }
    }

    /// Narrowest signed integer dtype holding every value in `[lo, hi]`.
    pub fn int_for_range(lo: i32, hi: i32) -> DType {
        if lo >= i8::MIN as i32 && hi <= i8::MAX as i32 {
            DType::I8
        } else if lo >= i16::MIN as i32 && hi <= i16::MAX as i32 {
            DType::I16
        } else {
            DType::I32
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Buffer {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I16(Vec<i16>),
    I32(Vec<i32>),
}

impl Buffer {
    pub fn len(&self) -> usize {
        match self {
            Buffer::F32(v) => v.len(),
            Buffer::I8(v) => v.len(),
            Buffer::I16(v) => v.len(),
            Buffer::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Buffer::F32(_) => DType::F32,
            Buffer::I8(_) => DType::I8,
            Buffer::I16(_) => DType::I16,
            Buffer::I32(_) => DType::I32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Buffer,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::dim("tensor", "rank must be at least 1"));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::dim("tensor", format!("extents must be positive, got {shape:?}")));
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::dim("tensor", "element count overflows"))?;
    if n != len {
        return Err(Error::dim("tensor", format!("shape {shape:?} implies {n} elements, buffer has {len}")));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Buffer) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Tensor { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Tensor::new(shape, Buffer::F32(data))
    }

    /// Stores integer values narrowed to `dtype`, failing if any value does not fit.
    pub fn from_ints(dtype: DType, shape: Vec<usize>, values: &[i32]) -> Result<Self> {
        let out_of_range = |v: i32| Error::Integrity(format!("{v} does not fit {dtype:?}"));
        let data = match dtype {
            DType::F32 => return Err(Error::DType { op: "from_ints", detail: "float dtype".into() }),
            DType::I8 => Buffer::I8(
                values.iter().map(|&v| i8::try_from(v).map_err(|_| out_of_range(v))).collect::<Result<_>>()?,
            ),
            DType::I16 => Buffer::I16(
                values.iter().map(|&v| i16::try_from(v).map_err(|_| out_of_range(v))).collect::<Result<_>>()?,
            ),
            DType::I32 => Buffer::I32(values.to_vec()),
        };
        Tensor::new(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_f32(shape.to_vec(), vec![0.0; n]).expect("valid zeros shape")
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor::from_f32(shape.to_vec(), vec![value; n]).expect("valid full shape")
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: Buffer::F32(vec![value]) }
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_f32(vec![n, n], data).expect("valid identity shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn buffer(&self) -> &Buffer {
        &self.data
    }

    pub fn byte_len(&self) -> usize {
        self.numel() * self.dtype().size()
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            Buffer::F32(v) => Ok(v),
            other => Err(Error::DType { op: "as_f32", detail: format!("tensor is {:?}", other.dtype()) }),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32]> {
        match &mut self.data {
            Buffer::F32(v) => Ok(v),
            other => Err(Error::DType { op: "as_f32_mut", detail: format!("tensor is {:?}", other.dtype()) }),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            Buffer::F32(v) => Ok(v),
            other => Err(Error::DType { op: "into_f32", detail: format!("tensor is {:?}", other.dtype()) }),
        }
    }

    /// Integer elements widened to i32.
    pub fn to_i32_vec(&self) -> Result<Vec<i32>> {
        Ok(match &self.data {
            Buffer::I8(v) => v.iter().map(|&x| x as i32).collect(),
            Buffer::I16(v) => v.iter().map(|&x| x as i32).collect(),
            Buffer::I32(v) => v.clone(),
            Buffer::F32(_) => return Err(Error::DType { op: "to_i32_vec", detail: "tensor is F32".into() }),
        })
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.numel())?;
        self.shape = shape;
        Ok(self)
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim("dims2", format!("expected rank 2, got {s:?}"))),
        }
    }

    /// Little-endian bytes of the buffer.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        match &self.data {
            Buffer::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Buffer::I8(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Buffer::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Buffer::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_le_bytes(dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let w = dtype.size();
        if bytes.len() % w != 0 {
            return Err(Error::Format(format!("{} bytes is not a multiple of {w}", bytes.len())));
        }
        let chunks = bytes.chunks_exact(w);
        let data = match dtype {
            DType::F32 => Buffer::F32(chunks.map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::I8 => Buffer::I8(chunks.map(|c| c[0] as i8).collect()),
            DType::I16 => Buffer::I16(chunks.map(|c| i16::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::I32 => Buffer::I32(chunks.map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Tensor::new(shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        let a = self.as_f32()?;
        let b = other.as_f32()?;
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max))
    }

    /// Bitwise equality of the buffers, distinguishing -0.0 from 0.0 and NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (Buffer::F32(a), Buffer::F32(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (a, b) => a == b,
        }
    }
}
