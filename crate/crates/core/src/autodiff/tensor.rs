use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type of the engine: f64 for verification, f32 for
/// training.
pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major N-d array. Feature maps use `N x C x D x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::LengthMismatch { expected, found: data.len() });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Self {
        let dims = dims.into();
        let n = dims.iter().product();
        Self { dims, data: vec![value; n] }
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Self {
        let dims = dims.into();
        let n = dims.iter().product();
        Self { dims, data: (0..n).map(f).collect() }
    }

    pub fn scalar(v: T) -> Self {
        Self { dims: vec![1], data: vec![v] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The dims of a 5-d feature map.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        <[usize; 5]>::try_from(self.dims.as_slice()).map_err(|_| {
            Error::ShapeMismatch(format!("expected an N x C x D x H x W tensor, got dims {:?}", self.dims))
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&v| U::of(v.as_f64())).collect() }
    }

    pub fn reshape(mut self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::LengthMismatch { expected: n, found: self.data.len() });
        }
        self.dims = dims;
        Ok(self)
    }

    /// Inner product of the flattened data.
    pub fn dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a.as_f64() * b.as_f64()).sum()
    }
}
