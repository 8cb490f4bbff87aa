//! Dense row-major tensor of `f64` values.
//!
//! Activations use batch, channel, height, width order. Convolution weights
//! use out, in/groups, kernel-height, kernel-width order.

use std::io::{Read, Write};

use crate::error::{invalid, shape_err, Result, StraError};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// On-disk element type of a serialized tensor. Computation is always `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

pub const TENSOR_MAGIC: &[u8; 4] = b"STRA";
pub const TENSOR_FORMAT_VERSION: u32 = 1;

fn check_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(invalid(op, "tensor rank must be at least 1"));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(invalid(op, format!("extent of axis {axis} is zero")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape("Tensor::new", &shape)?;
        if len != data.len() {
            return Err(shape_err("Tensor::new", "data length", len, data.len()));
        }
        Ok(Self { shape, data })
    }

    /// Panics on a zero extent; use for shapes computed from validated inputs.
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let len = check_shape("Tensor::full", &shape).expect("invalid tensor shape");
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let len = check_shape("Tensor::from_fn", &shape).expect("invalid tensor shape");
        Self {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Extents of a rank-4 activation as `(batch, channels, height, width)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err("dims4", "rank", 4, self.rank())),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape("reshape", &shape)?;
        if len != self.data.len() {
            return Err(shape_err("reshape", "element count", self.data.len(), len));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(invalid(
                op,
                format!("shape {:?} does not match {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Debug-build check that a forward op produced finite values.
    #[inline]
    pub(crate) fn check_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(StraError::Numerical {
                op,
                reason: format!("non-finite value at flat index {i}"),
            }),
            None => Ok(()),
        }
    }

    /// Channel slice `[c0, c0 + count)` of a rank-4 tensor.
    pub fn channel_slice(&self, c0: usize, count: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if c0 + count > c || count == 0 {
            return Err(invalid("channel_slice", format!("range {c0}..{} outside {c} channels", c0 + count)));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * count * plane);
        for b in 0..n {
            let start = (b * c + c0) * plane;
            data.extend_from_slice(&self.data[start..start + count * plane]);
        }
        Ok(Tensor {
            shape: vec![n, count, h, w],
            data,
        })
    }

    pub fn write_to<W: Write>(&self, out: &mut W, dtype: DType) -> Result<()> {
        out.write_all(TENSOR_MAGIC)?;
        out.write_all(&TENSOR_FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in &self.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        out.write_all(&[dtype as u8])?;
        match dtype {
            DType::F64 => {
                for v in &self.data {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
            DType::F32 => {
                for v in &self.data {
                    out.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self, dtype: DType) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + self.len() * 8);
        self.write_to(&mut buf, dtype).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(StraError::Format(format!("bad tensor magic {magic:?}")));
        }
        let version = read_u32(input)?;
        if version != TENSOR_FORMAT_VERSION {
            return Err(StraError::Format(format!("unsupported tensor format version {version}")));
        }
        let rank = read_u32(input)? as usize;
        if rank == 0 || rank > 16 {
            return Err(StraError::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(input)? as usize);
        }
        let mut tag = [0u8; 1];
        input.read_exact(&mut tag)?;
        let len = check_shape("read_from", &shape).map_err(|e| StraError::Format(e.to_string()))?;
        let data = match tag[0] {
            0 => {
                let mut raw = vec![0u8; len * 8];
                input.read_exact(&mut raw)?;
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
            1 => {
                let mut raw = vec![0u8; len * 4];
                input.read_exact(&mut raw)?;
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
            other => return Err(StraError::Format(format!("unknown dtype tag {other}"))),
        };
        Ok(Tensor { shape, data })
    }
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_zero_extent_and_bad_length() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn header_layout_is_little_endian() {
        let t = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let bytes = t.to_bytes(DType::F64);
        assert_eq!(&bytes[0..4], b"STRA");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &2u64.to_le_bytes());
        assert_eq!(bytes[20], 0);
        assert_eq!(&bytes[21..29], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 21 + 16);
    }

    #[test]
    fn f32_storage_rounds() {
        let t = Tensor::new(vec![1], vec![0.1]).unwrap();
        let back = Tensor::read_from(&mut &t.to_bytes(DType::F32)[..]).unwrap();
        assert_eq!(back.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = Tensor::scalar(1.0).to_bytes(DType::F64);
        bytes[0] = b'X';
        assert!(matches!(Tensor::read_from(&mut &bytes[..]), Err(StraError::Format(_))));
    }

    proptest! {
        #[test]
        fn serialization_round_trips(shape in prop::collection::vec(1usize..4, 1..5), seed in any::<u64>()) {
            let mut rng = crate::rng::Rng::new(seed);
            let t = Tensor::from_fn(shape, |_| rng.normal() * 1e3);
            let back = Tensor::read_from(&mut &t.to_bytes(DType::F64)[..]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
