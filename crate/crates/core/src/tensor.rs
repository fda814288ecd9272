//! Dense row-major tensors.
//!
//! A [`Tensor`] owns a contiguous buffer and an explicit shape. Every operation
//! returns a new tensor; inputs are never mutated. Layout changes (permute) are
//! physical copies so that downstream kernels always see contiguous memory.

use std::fmt::Debug;
use std::io::{Read, Write};

use num_traits::{Float, NumAssign};

use crate::error::{CtmError, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"CTMTNSR\0";
pub const TENSOR_VERSION: u32 = 1;

/// On-disk element type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            other => Err(CtmError::format(format!("unknown dtype tag {other}"))),
        }
    }
}

/// Scalar types a tensor can hold. `f64` is the default precision.
pub trait Element: Float + NumAssign + Default + Debug + Send + Sync + 'static {
    const DTYPE: DType;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(bytes);
        f64::from_le_bytes(buf)
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(bytes);
        f32::from_le_bytes(buf)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(CtmError::invalid("tensor rank must be at least 1"));
    }
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return Err(CtmError::invalid(format!(
            "extent of axis {axis} is zero in shape {shape:?}"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| CtmError::invalid(format!("shape {shape:?} overflows usize")))
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for axis in (0..shape.len().saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * shape[axis + 1];
    }
    strides
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel = validate_shape(&shape)?;
        if numel != data.len() {
            return Err(CtmError::invalid(format!(
                "shape {shape:?} needs {numel} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = validate_shape(shape).expect("zeros/full require a valid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let mut out = Self::zeros(shape);
        let mut index = vec![0usize; shape.len()];
        for slot in out.data.iter_mut() {
            *slot = f(&index);
            increment_index(&mut index, shape);
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
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

    /// Row-major offset of a multi-index. Panics on out-of-range indices.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (axis, (&i, &e)) in index.iter().zip(&self.shape).enumerate() {
            assert!(i < e, "index {i} out of range for axis {axis} (extent {e})");
            off = off * e + i;
        }
        off
    }

    /// Inverse of [`Tensor::offset`].
    pub fn unravel(&self, mut offset: usize) -> Vec<usize> {
        assert!(offset < self.data.len(), "offset out of range");
        let mut index = vec![0; self.shape.len()];
        for axis in (0..self.shape.len()).rev() {
            index[axis] = offset % self.shape[axis];
            offset /= self.shape[axis];
        }
        index
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Same buffer, new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel = validate_shape(shape)?;
        if numel != self.data.len() {
            return Err(CtmError::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Reorders axes so that output axis `k` is input axis `axes[k]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.shape.len();
        if axes.len() != rank {
            return Err(CtmError::invalid(format!(
                "permutation {axes:?} has length {}, tensor rank is {rank}",
                axes.len()
            )));
        }
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(CtmError::invalid(format!(
                    "{axes:?} is not a permutation of 0..{rank}"
                )));
            }
            seen[a] = true;
        }
        let in_strides = strides_of(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();

        let mut data = Vec::with_capacity(self.data.len());
        let inner = rank - 1;
        let inner_extent = out_shape[inner];
        let inner_stride = src_strides[inner];
        let mut index = vec![0usize; rank];
        let mut base = 0usize;
        let outer_count = self.data.len() / inner_extent;
        for _ in 0..outer_count {
            if inner_stride == 1 {
                data.extend_from_slice(&self.data[base..base + inner_extent]);
            } else {
                data.extend((0..inner_extent).map(|k| self.data[base + k * inner_stride]));
            }
            // advance the outer multi-index (all axes but the last)
            for axis in (0..inner).rev() {
                index[axis] += 1;
                base += src_strides[axis];
                if index[axis] < out_shape[axis] {
                    break;
                }
                base -= src_strides[axis] * out_shape[axis];
                index[axis] = 0;
            }
        }
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(CtmError::invalid(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn zip_map(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    /// `self += other`, in place. Used by gradient accumulation.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Writes the little-endian tensor record: magic, version, rank, extents,
    /// dtype tag, raw data.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + 4 + 4 + 8 * self.rank() + 1 + T::BYTES * self.len());
        buf.extend_from_slice(TENSOR_MAGIC);
        buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        for &e in &self.shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        buf.push(T::DTYPE.tag());
        for &v in &self.data {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic, "tensor magic")?;
        if &magic != TENSOR_MAGIC {
            return Err(CtmError::format("bad tensor magic"));
        }
        let version = read_u32(r, "tensor version")?;
        if version != TENSOR_VERSION {
            return Err(CtmError::format(format!(
                "unsupported tensor version {version}"
            )));
        }
        let rank = read_u32(r, "tensor rank")? as usize;
        if rank == 0 || rank > 16 {
            return Err(CtmError::format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = read_u64(r, "tensor extent")?;
            shape.push(usize::try_from(e).map_err(|_| CtmError::format("extent overflow"))?);
        }
        let numel = validate_shape(&shape).map_err(|e| CtmError::format(e.to_string()))?;
        let mut tag = [0u8; 1];
        read_exact(r, &mut tag, "dtype tag")?;
        let dtype = DType::from_tag(tag[0])?;
        if dtype != T::DTYPE {
            return Err(CtmError::format(format!(
                "dtype mismatch: file holds {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let byte_len = numel
            .checked_mul(T::BYTES)
            .ok_or_else(|| CtmError::format("tensor byte length overflow"))?;
        let mut raw = vec![0u8; byte_len];
        read_exact(r, &mut raw, "tensor data")?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(Self { shape, data })
    }
}

fn increment_index(index: &mut [usize], shape: &[usize]) {
    for axis in (0..shape.len()).rev() {
        index[axis] += 1;
        if index[axis] < shape[axis] {
            return;
        }
        index[axis] = 0;
    }
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CtmError::format(format!("truncated input while reading {what}"))
        } else {
            CtmError::Io(e)
        }
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Inverse of a permutation.
pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (k, &a) in axes.iter().enumerate() {
        inv[a] = k;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (1..=n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn transpose_2d() {
        let t = seq(&[2, 3]);
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn identity_permutation_is_bit_identical() {
        let t = seq(&[2, 3, 4]);
        assert_eq!(t.permute(&[0, 1, 2]).unwrap(), t);
    }

    #[test]
    fn tcc_layout_permutation() {
        // (T,C,H,W) -> (H,W,T,C) -> (1, H*W, T, C)
        let (tt, cc, hh, ww) = (2, 2, 2, 2);
        let f = seq(&[tt, cc, hh, ww]);
        let o = f.permute(&[2, 3, 0, 1]).unwrap().into_reshape(&[1, hh * ww, tt, cc]).unwrap();
        let mut checked = 0;
        for t in 0..tt {
            for c in 0..cc {
                for h in 0..hh {
                    for w in 0..ww {
                        assert_eq!(o.get(&[0, h * ww + w, t, c]), f.get(&[t, c, h, w]));
                        checked += 1;
                    }
                }
            }
        }
        assert_eq!(checked, 16);
    }

    #[test]
    fn bad_permutations_rejected() {
        let t = seq(&[2, 3]);
        assert!(matches!(t.permute(&[0]), Err(CtmError::InvalidArgument(_))));
        assert!(matches!(t.permute(&[1, 1]), Err(CtmError::InvalidArgument(_))));
        assert!(matches!(t.permute(&[0, 2]), Err(CtmError::InvalidArgument(_))));
    }

    #[test]
    fn add_examples() {
        let a = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new([2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.add(&a.zeros_like()).unwrap(), a);
        let c = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(a.add(&c), Err(CtmError::InvalidArgument(_))));
    }

    #[test]
    fn add_is_associative_on_large_integers() {
        let big = (1u64 << 50) as f64;
        let a = Tensor::new([3], vec![big, 3.0, -big]).unwrap();
        let b = Tensor::new([3], vec![12345.0, big - 7.0, 1.0]).unwrap();
        let c = Tensor::new([3], vec![-99.0, 5.0, big]).unwrap();
        let left = a.add(&b).unwrap().add(&c).unwrap();
        let right = a.add(&b.add(&c).unwrap()).unwrap();
        assert_eq!(left, right);
    }

    #[test]
    fn shape_validation() {
        assert!(Tensor::<f64>::new([2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new([2, 2], vec![0.0; 3]).is_err());
        assert!(seq(&[2, 3]).reshape(&[4, 2]).is_err());
    }

    #[test]
    fn serialization_layout() {
        let t = Tensor::new([2], vec![1.5f64, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"CTMTNSR\0");
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(buf[24], 0);
        assert_eq!(&buf[25..33], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 25 + 16);

        let t32: Tensor<f32> = t.cast();
        let mut buf32 = Vec::new();
        t32.write_to(&mut buf32).unwrap();
        assert_eq!(buf32[24], 1);
        assert_eq!(Tensor::<f32>::read_from(&mut buf32.as_slice()).unwrap(), t32);
        assert!(Tensor::<f64>::read_from(&mut buf32.as_slice()).is_err());
    }

    #[test]
    fn truncated_tensor_is_format_error() {
        let t = seq(&[3, 3]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(
            Tensor::<f64>::read_from(&mut buf.as_slice()),
            Err(CtmError::Format(_))
        ));
    }

    fn shape_and_perm() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        prop::collection::vec(1usize..5, 1..=5).prop_flat_map(|shape| {
            let rank = shape.len();
            (Just(shape), Just((0..rank).collect::<Vec<_>>()).prop_shuffle())
        })
    }

    proptest! {
        #[test]
        fn permute_round_trip((shape, perm) in shape_and_perm()) {
            let t = Tensor::from_fn(&shape, |idx| idx.iter().fold(0.0, |acc, &i| acc * 7.0 + i as f64 + 0.25));
            let p = t.permute(&perm).unwrap();
            let mut sorted_in = t.data().to_vec();
            let mut sorted_out = p.data().to_vec();
            sorted_in.sort_by(f64::total_cmp);
            sorted_out.sort_by(f64::total_cmp);
            prop_assert_eq!(sorted_in, sorted_out);
            let back = p.permute(&inverse_permutation(&perm)).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn offset_unravel_round_trip(shape in prop::collection::vec(1usize..6, 1..=5), seed in 0usize..10_000) {
            let t = Tensor::<f64>::zeros(&shape);
            let off = seed % t.len();
            prop_assert_eq!(t.offset(&t.unravel(off)), off);
        }

        #[test]
        fn serialization_round_trip(shape in prop::collection::vec(1usize..5, 1..=4), scale in -1e6f64..1e6) {
            let t = Tensor::from_fn(&shape, |idx| scale * idx.iter().sum::<usize>() as f64 - 0.5);
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            prop_assert_eq!(Tensor::<f64>::read_from(&mut buf.as_slice()).unwrap(), t);
        }
    }
}
