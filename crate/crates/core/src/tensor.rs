//! Dense row-major tensors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking that `data` fills `shape` and every extent is positive.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} elements, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    /// Rank-0 tensor.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self { shape, data }
    }

    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
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

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    #[allow(clippy::eq_op)]
    pub fn is_finite(&self) -> bool {
        // `x - x` is zero for finite `x` and NaN otherwise; eight independent
        // lanes let the loop vectorize.
        let mut acc = [T::zero(); 8];
        let chunks = self.data.chunks_exact(8);
        let rest = chunks.remainder();
        for c in chunks {
            for (a, &x) in acc.iter_mut().zip(c) {
                *a += x - x;
            }
        }
        acc.iter().all(|a| *a == T::zero()) && rest.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn rows(&self, start: usize, len: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Self {
            shape,
            data: self.data[start * inner..(start + len) * inner].to_vec(),
        }
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack_rows(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("stack_rows", "no inputs"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape(
                    "stack_rows",
                    format!("{:?} vs {:?}", first.shape, p.shape),
                ));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self { shape, data })
    }

    /// SHA-256 over shape and little-endian element bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.hash_into(&mut h);
        hex::encode(h.finalize())
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        for &d in &self.shape {
            h.update((d as u64).to_le_bytes());
        }
        let mut buf = Vec::with_capacity(self.data.len() * T::DTYPE.size());
        for &x in &self.data {
            x.write_le(&mut buf);
        }
        h.update(&buf);
    }

    /// Bitwise equality, distinguishing signed zeros and NaN payloads.
    pub fn bits_eq(&self, other: &Self) -> bool {
        if self.shape != other.shape {
            return false;
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (&x, &y) in self.data.iter().zip(&other.data) {
            a.clear();
            b.clear();
            x.write_le(&mut a);
            y.write_le(&mut b);
            if a != b {
                return false;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn digest_tracks_shape_and_values() {
        let a = Tensor::<f32>::from_f64([2, 2], &[1., 2., 3., 4.]).unwrap();
        let b = a.clone().reshape([4]).unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), a.clone().digest());
    }

    #[test]
    fn bits_eq_sees_signed_zero() {
        let a = Tensor::<f64>::from_f64([1], &[0.0]).unwrap();
        let b = Tensor::<f64>::from_f64([1], &[-0.0]).unwrap();
        assert_eq!(a, b);
        assert!(!a.bits_eq(&b));
    }
}
