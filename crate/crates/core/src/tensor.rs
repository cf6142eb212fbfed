//! Dense row-major N-dimensional tensors.
//!
//! [`Tensor`] is the carrier for every layer and filter in the network. Element
//! precision is a type parameter: `f32` for training, `f64` for gradient checks.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{HcnnError, Result};

const TENSOR_MAGIC: &[u8; 4] = b"HTNS";
const TENSOR_VERSION: u32 = 1;

/// How a signal is extended beyond its finite domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    ZeroPad,
    Periodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(HcnnError::Format(format!("unknown dtype tag {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Real scalar types a [`Tensor`] can hold.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes one element of dtype `dtype` from `bytes`, converting if needed.
    fn read_le(dtype: DType, bytes: &[u8]) -> Self;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Every pointer/stride combination must address memory inside the
    /// corresponding allocation for the given `m`, `k`, `n`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()),
            DType::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()) as f32,
        }
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            DType::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense real tensor stored in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    strides
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(HcnnError::shape(format!("zero-length axis in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(HcnnError::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "zero-length axis in {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let mut out = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for slot in out.data.iter_mut() {
            *slot = f(&idx);
            increment(&mut idx, shape);
        }
        out
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        let n = data.len();
        Tensor {
            shape: vec![n],
            data,
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (a, (&i, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(i < d, "index {i} out of bounds for axis {a} of length {d}");
            off = off * d + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(HcnnError::InvalidAxis {
                axis,
                rank: self.rank(),
            });
        }
        Ok(())
    }

    /// Sums over `axis`. With `keep_dim` the axis stays with length 1.
    pub fn sum_axis(&self, axis: usize, keep_dim: bool) -> Result<Self> {
        self.check_axis(axis)?;
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..len {
                let src = &self.data[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        if keep_dim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
        }
        Tensor::new(shape, out)
    }

    /// Shifts the tensor by `shift` along `axis`: `out[i] = z[i - shift]`.
    ///
    /// Periodic mode wraps around; zero-pad mode fills vacated positions with 0.
    pub fn translate(&self, axis: usize, shift: isize, mode: BoundaryMode) -> Result<Self> {
        self.check_axis(axis)?;
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); self.data.len()];
        for o in 0..outer {
            for i in 0..len {
                let src = i as isize - shift;
                let src = match mode {
                    BoundaryMode::Periodic => src.rem_euclid(len as isize) as usize,
                    BoundaryMode::ZeroPad => {
                        if src < 0 || src >= len as isize {
                            continue;
                        }
                        src as usize
                    }
                };
                let d = (o * len + i) * inner;
                let s = (o * len + src) * inner;
                out[d..d + inner].copy_from_slice(&self.data[s..s + inner]);
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Zero-pads `axis` with `before` and `after` extra entries.
    pub fn pad(&self, axis: usize, before: usize, after: usize) -> Result<Self> {
        self.check_axis(axis)?;
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let new_len = len + before + after;
        let mut out = vec![T::zero(); outer * new_len * inner];
        for o in 0..outer {
            let s = o * len * inner;
            let d = (o * new_len + before) * inner;
            out[d..d + len * inner].copy_from_slice(&self.data[s..s + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = new_len;
        Tensor::new(shape, out)
    }

    /// Keeps `len` entries of `axis` starting at `start`.
    pub fn crop(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.check_axis(axis)?;
        let old = self.shape[axis];
        if len == 0 || start + len > old {
            return Err(HcnnError::shape(format!(
                "crop [{start}, {}) outside axis {axis} of length {old}",
                start + len
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * old + start) * inner;
            out.extend_from_slice(&self.data[s..s + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(shape, out)
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(HcnnError::shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, alpha: T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * alpha).collect(),
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(HcnnError::NonFinite(context.to_string()))
        }
    }

    /// `max |a - b| / max(max |a|, max |b|)`, or the absolute difference when
    /// both tensors are zero.
    pub fn relative_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        let diff = self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs().as_f64()));
        let scale = self.max_abs().max(other.max_abs()).as_f64();
        Ok(if scale > 0.0 { diff / scale } else { diff })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21 + 8 * self.rank() + self.len() * T::DTYPE.size());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(T::DTYPE.tag());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Reads one serialized tensor, converting the payload to `T` if the stored
    /// dtype differs.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(HcnnError::Format("bad tensor magic".into()));
        }
        let version = read_u32(r)?;
        if version != TENSOR_VERSION {
            return Err(HcnnError::Format(format!(
                "unsupported tensor version {version}"
            )));
        }
        let rank = read_u32(r)? as usize;
        if rank > 16 {
            return Err(HcnnError::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let dtype = DType::from_tag(tag[0])?;
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * dtype.size()];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(dtype.size())
            .map(|c| T::read_le(dtype, c))
            .collect();
        Tensor::new(shape, data).map_err(|e| HcnnError::Format(e.to_string()))
    }
}

/// Row-major odometer increment; wraps to all zeros after the last index.
pub(crate) fn increment(idx: &mut [usize], shape: &[usize]) {
    for a in (0..idx.len()).rev() {
        idx[a] += 1;
        if idx[a] < shape[a] {
            return;
        }
        idx[a] = 0;
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_axis_of_ones() {
        let t = Tensor::<f64>::ones(&[2, 3]);
        let s = t.sum_axis(1, false).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[3.0, 3.0]);
        let k = t.sum_axis(0, true).unwrap();
        assert_eq!(k.shape(), &[1, 3]);
        assert_eq!(k.data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn translate_periodic_is_cyclic_shift() {
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0]);
        let s = t.translate(0, 1, BoundaryMode::Periodic).unwrap();
        assert_eq!(s.data(), &[3.0, 1.0, 2.0]);
        let back = s.translate(0, -1, BoundaryMode::Periodic).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn translate_zero_pad_fills_zeros() {
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0]);
        let s = t.translate(0, 2, BoundaryMode::ZeroPad).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 1.0]);
        let s = t.translate(0, -1, BoundaryMode::ZeroPad).unwrap();
        assert_eq!(s.data(), &[2.0, 3.0, 0.0]);
    }

    #[test]
    fn translate_inner_axis() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| (i[0] * 10 + i[1]) as f64);
        let s = t.translate(1, 1, BoundaryMode::Periodic).unwrap();
        assert_eq!(s.data(), &[2.0, 0.0, 1.0, 12.0, 10.0, 11.0]);
    }

    #[test]
    fn invalid_axis_is_reported() {
        let t = Tensor::<f32>::ones(&[2, 2]);
        assert!(matches!(
            t.sum_axis(2, false),
            Err(HcnnError::InvalidAxis { axis: 2, rank: 2 })
        ));
        assert!(t.translate(5, 1, BoundaryMode::Periodic).is_err());
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn pad_then_crop_restores() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 2], |i| (i[0] + 2 * i[1] + 7 * i[2]) as f64);
        let p = t.pad(1, 2, 1).unwrap();
        assert_eq!(p.shape(), &[2, 6, 2]);
        assert_eq!(p.get(&[1, 0, 1]), 0.0);
        assert_eq!(p.crop(1, 2, 3).unwrap(), t);
    }

    #[test]
    fn ensure_finite_flags_nan() {
        let t = Tensor::<f32>::from_vec(vec![1.0, f32::NAN]);
        assert!(matches!(t.ensure_finite("x"), Err(HcnnError::NonFinite(_))));
    }

    #[test]
    fn serialization_header_layout() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| (i[0] * 3 + i[1]) as f32);
        let bytes = t.to_bytes();
        assert_eq!(&bytes[0..4], b"HTNS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 3);
        assert_eq!(bytes[28], 0);
        assert_eq!(bytes.len(), 29 + 6 * 4);
        assert_eq!(f32::from_le_bytes(bytes[33..37].try_into().unwrap()), 1.0);
    }

    #[test]
    fn read_converts_dtype() {
        let t = Tensor::<f64>::from_vec(vec![0.5, -2.25]);
        let back: Tensor<f32> = Tensor::read_from(&mut t.to_bytes().as_slice()).unwrap();
        assert_eq!(back.data(), &[0.5f32, -2.25]);
    }

    #[test]
    fn truncated_payload_errors() {
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0]);
        let bytes = t.to_bytes();
        assert!(Tensor::<f64>::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
    }
}
