//! Dense NCHW tensors and the primitive operations the network is built from.
//!
//! Every operation here is a pure function of its inputs. The serial
//! convolution path accumulates in a fixed order so that results are
//! bit-reproducible; the parallel path lives in [`conv::conv2d_parallel`].

pub mod conv;
pub mod ops;

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

use crate::error::{shape_err, Result};

pub use conv::{
    conv2d, conv2d_grad_input, conv2d_grad_params, conv2d_naive, conv2d_parallel, BatchNormParams,
    Conv2dParams,
};
pub use ops::{
    add, add_channel_bias, batchnorm_infer, channel_scale, concat_channels, global_avg_pool, mul,
    pixel_shuffle, pixel_unshuffle, prelu, sigmoid, sub,
};

/// Storage precision of a tensor, also used as the on-disk dtype tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Real scalar type a tensor can hold.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the front of `bytes`, which must hold at least
    /// `DTYPE.size_bytes()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(b)
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

/// Shorthand for converting an `f64` literal into the working precision.
#[inline]
pub fn cast<T: Element>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// Dimensions of an NCHW tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        if dims.n == 0 || dims.c == 0 || dims.h == 0 || dims.w == 0 {
            return shape_err(format!("all dims must be positive, got {dims}"));
        }
        if data.len() != dims.numel() {
            return shape_err(format!(
                "data length {} does not match dims {dims} ({} elements)",
                data.len(),
                dims.numel()
            ));
        }
        Ok(Tensor { dims, data })
    }

    /// Panics on zero dims; intended for internally computed shapes.
    pub fn full(dims: Dims, value: T) -> Self {
        assert!(dims.numel() > 0, "tensor dims must be positive: {dims}");
        Tensor { dims, data: vec![value; dims.numel()] }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: Dims) -> Self {
        Self::full(dims, T::one())
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.numel());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for h in 0..dims.h {
                    for w in 0..dims.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { dims, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(dims: Dims, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..dims.numel()).map(|_| cast(rng.gen_range(lo..hi))).collect();
        Tensor { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + h) * self.dims.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let o = self.offset(n, c, h, w);
        self.data[o] = v;
    }

    /// Contiguous `h*w` plane of one channel of one sample.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn reshape(self, dims: Dims) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / cast(self.numel() as f64)
    }

    /// Samples `[start, start+count)` along the batch axis.
    pub fn batch_slice(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.dims.n {
            return shape_err(format!(
                "batch slice {start}..{} out of range for n={}",
                start + count,
                self.dims.n
            ));
        }
        let per = self.dims.c * self.dims.plane();
        let dims = Dims { n: count, ..self.dims };
        Ok(Tensor { dims, data: self.data[start * per..(start + count) * per].to_vec() })
    }

    /// Stacks tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = match items.first() {
            Some(t) => t.dims,
            None => return shape_err("cannot stack an empty list"),
        };
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let d = t.dims;
            if (d.c, d.h, d.w) != (first.c, first.h, first.w) {
                return shape_err(format!("stack: {d} incompatible with {first}"));
            }
            n += d.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { dims: Dims { n, ..first }, data })
    }

    pub fn convert<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| cast::<U>(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.dims != other.dims {
            return shape_err(format!("compare {} vs {}", self.dims, other.dims));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_is_row_major_nchw() {
        let t = Tensor::<f64>::from_fn(Dims::new(2, 3, 4, 5), |n, c, h, w| {
            (((n * 3 + c) * 4 + h) * 5 + w) as f64
        });
        for (i, v) in t.data().iter().enumerate() {
            assert_eq!(*v, i as f64);
        }
        assert_eq!(t.offset(1, 2, 3, 4), 119);
    }

    #[test]
    fn rejects_zero_dims_and_bad_length() {
        assert!(Tensor::<f32>::from_vec(Dims::new(1, 0, 2, 2), vec![]).is_err());
        assert!(Tensor::<f32>::from_vec(Dims::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn stack_and_slice_roundtrip() {
        let a = Tensor::<f32>::full(Dims::new(1, 2, 2, 2), 1.0);
        let b = Tensor::<f32>::full(Dims::new(2, 2, 2, 2), 2.0);
        let s = Tensor::stack(&[a.clone(), b]).unwrap();
        assert_eq!(s.dims(), Dims::new(3, 2, 2, 2));
        assert_eq!(s.batch_slice(0, 1).unwrap(), a);
        assert!(s.batch_slice(2, 2).is_err());
    }
}
