//! Dense row-major tensors over `f32` or `f64`.
//!
//! Tensors are immutable values: data lives behind an `Arc`, so clones are
//! cheap and a tensor can be shared across threads.  Every op returns a new
//! tensor.  Video tensors use the layout `[frames, height, width, channels]`.

pub mod kernels;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::Float;

use crate::error::{shape_err, Error, Result};

/// On-disk dtype code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn from_code(code: u8) -> Result<DType> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar element type.
pub trait Real:
    Float + Debug + Default + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + std::iter::Sum
{
    const DTYPE: DType;
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f64> {
    dims: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{:?}>{:?}", T::DTYPE, self.dims)?;
        if self.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.contains(&0) {
            return Err(shape_err!("zero-sized dimension in {dims:?}"));
        }
        if n != data.len() {
            return Err(shape_err!(
                "dims {dims:?} hold {n} values but data has {}",
                data.len()
            ));
        }
        Ok(Tensor {
            dims,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor {
            dims,
            data: Arc::new(data),
        }
    }

    pub fn full(dims: &[usize], v: T) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![v; n])
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(dims.to_vec(), data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| a.as_ref().clone())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.dims.len());
        idx.iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of bounds for dim {d}");
                acc * d + i
            })
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.len() {
            return Err(shape_err!("cannot reshape {:?} to {dims:?}", self.dims));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.dims.clone(),
            self.data.iter().map(|v| U::of(v.f64())).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two tensors with identical dims.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(shape_err!("dims {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(Self::from_parts(
            self.dims.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    fn broadcast(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        let (big, small, swapped) = if self.dims.len() >= other.dims.len() {
            (self, other, false)
        } else {
            (other, self, true)
        };
        let tail = &big.dims[big.dims.len() - small.dims.len()..];
        if tail != small.dims.as_slice() {
            return Err(shape_err!(
                "{op}: {:?} does not broadcast against {:?}",
                self.dims,
                other.dims
            ));
        }
        let m = small.len();
        let out = big
            .data
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let b = small.data[i % m];
                if swapped {
                    f(b, a)
                } else {
                    f(a, b)
                }
            })
            .collect();
        Ok(Self::from_parts(big.dims.clone(), out))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.broadcast(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.broadcast(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.broadcast(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        if let Some(b) = other.data.iter().find(|b| b.abs() < T::epsilon()) {
            return Err(Error::Domain(format!("division by {b:?}")));
        }
        self.broadcast(other, "div", |a, b| a / b)
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|v| v + s)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `a·self + b·other`, the workhorse of the samplers.
    pub fn lincomb(&self, a: T, other: &Self, b: T) -> Result<Self> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn exp(&self) -> Self {
        self.map(|v| v.exp())
    }

    pub fn log(&self) -> Result<Self> {
        if let Some(v) = self.data.iter().find(|v| **v <= T::zero()) {
            return Err(Error::Domain(format!("log of {v:?}")));
        }
        Ok(self.map(|v| v.ln()))
    }

    pub fn sqrt(&self) -> Result<Self> {
        if let Some(v) = self.data.iter().find(|v| **v < T::zero()) {
            return Err(Error::Domain(format!("sqrt of {v:?}")));
        }
        Ok(self.map(|v| v.sqrt()))
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn silu(&self) -> Self {
        self.map(|v| v * sigmoid(v))
    }

    pub fn tanh(&self) -> Self {
        self.map(|v| v.tanh())
    }

    pub fn sum(&self) -> T {
        kernels::sum(&self.data)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.len() as f64)
    }

    pub fn dot(&self, other: &Self) -> T {
        kernels::dot(&self.data, &other.data)
    }

    pub fn sum_squares(&self) -> T {
        kernels::dot(&self.data, &self.data)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    // ---- video helpers: axis 0 is the frame axis ----

    pub fn frames(&self) -> usize {
        self.dims[0]
    }

    pub fn frame_len(&self) -> usize {
        self.len() / self.dims[0]
    }

    pub fn frame(&self, f: usize) -> Tensor<T> {
        let n = self.frame_len();
        let mut dims = self.dims.clone();
        dims[0] = 1;
        Tensor::from_parts(dims, self.data[f * n..(f + 1) * n].to_vec())
    }

    pub fn select_frames(&self, idx: &[usize]) -> Result<Tensor<T>> {
        if idx.is_empty() {
            return Err(shape_err!("empty frame selection"));
        }
        let n = self.frame_len();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &f in idx {
            if f >= self.frames() {
                return Err(shape_err!("frame {f} out of range {}", self.frames()));
            }
            out.extend_from_slice(&self.data[f * n..(f + 1) * n]);
        }
        let mut dims = self.dims.clone();
        dims[0] = idx.len();
        Ok(Tensor::from_parts(dims, out))
    }

    /// Concatenate along the frame axis.
    pub fn cat_frames(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| shape_err!("nothing to concatenate"))?;
        let mut out = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.dims[1..] != first.dims[1..] {
                return Err(shape_err!("frame dims {:?} vs {:?}", p.dims, first.dims));
            }
            frames += p.dims[0];
            out.extend_from_slice(&p.data);
        }
        let mut dims = first.dims.clone();
        dims[0] = frames;
        Ok(Tensor::from_parts(dims, out))
    }

    /// Copy of `self` with the frames listed in `idx` replaced, in order, by
    /// the frames of `src`.
    pub fn with_frames(&self, idx: &[usize], src: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.frame_len();
        if src.frame_len() != n || src.frames() != idx.len() {
            return Err(shape_err!(
                "cannot place {:?} into frames {idx:?} of {:?}",
                src.dims,
                self.dims
            ));
        }
        let mut out = self.to_vec();
        for (k, &f) in idx.iter().enumerate() {
            out[f * n..(f + 1) * n].copy_from_slice(&src.data[k * n..(k + 1) * n]);
        }
        Ok(Tensor::from_parts(self.dims.clone(), out))
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_identity_mul() {
        let a = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let x = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.7 - 1.0);
        assert_eq!(x.mul(&Tensor::ones(&[2, 3])).unwrap(), x);
        assert_eq!(Tensor::<f64>::scalar(0.0).sigmoid().item(), 0.5);
    }

    #[test]
    fn broadcast_over_leading_axes() {
        let x = Tensor::<f64>::from_fn(&[2, 2, 3], |i| i as f64);
        let b = Tensor::new(vec![3], vec![10.0, 20.0, 30.0]).unwrap();
        let y = x.add(&b).unwrap();
        assert_eq!(y.dims(), &[2, 2, 3]);
        assert_eq!(y.get(&[1, 1, 2]), 11.0 + 30.0);
        let z = b.sub(&x).unwrap();
        assert_eq!(z.get(&[0, 0, 0]), 10.0);
        let bad = Tensor::<f64>::zeros(&[2]);
        assert!(matches!(x.add(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn domain_errors() {
        let a = Tensor::<f64>::ones(&[2]);
        let z = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(a.div(&z), Err(Error::Domain(_))));
        assert!(matches!(z.log(), Err(Error::Domain(_))));
        assert!(matches!(z.scale(-1.0).add_scalar(-1.0).sqrt(), Err(Error::Domain(_))));
    }

    #[test]
    fn frame_selection_roundtrip() {
        let v = Tensor::<f64>::from_fn(&[4, 2, 2, 1], |i| i as f64);
        let s = v.select_frames(&[3, 1]).unwrap();
        assert_eq!(s.get(&[0, 0, 0, 0]), 12.0);
        let w = Tensor::zeros(&[4, 2, 2, 1]).with_frames(&[3, 1], &s).unwrap();
        assert_eq!(w.frame(1), v.frame(1));
        assert_eq!(w.frame(0), Tensor::zeros(&[1, 2, 2, 1]));
    }
}
