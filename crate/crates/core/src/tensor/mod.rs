//! Dense row-major tensors and the numerical primitives the rest of the
//! network is assembled from.
//!
//! Every value is immutable once built and every constructor rejects
//! non-finite data, so a NaN can never leave one of these functions
//! silently. Most primitives come paired with a `*_backward` function that
//! maps an output cotangent to input cotangents.

mod fft;
mod io;
mod ops;

use std::fmt::{Debug, Display};

use num_traits::Float;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub use fft::{circular_convolve, circular_convolve_backward, circular_correlate, dft, idft, idft_real, ComplexVector};
pub use io::{read_tensor, read_tensor_file, write_tensor, write_tensor_file, AnyTensor, Dtype};
pub use ops::{
    activate, activate_backward, avg_pool2d, avg_pool2d_backward, global_avg_pool, global_avg_pool_backward,
    l2_normalize, l2_normalize_backward, linear_apply, linear_apply_backward, resample_spatial,
    resample_spatial_backward, signed_sqrt, signed_sqrt_backward, Activation,
};

/// Scalar element type. Implemented for `f64` (the default) and `f32`.
pub trait Real: Float + Default + Debug + Display + Send + Sync + 'static {
    const DTYPE: Dtype;

    /// In-place unnormalized complex FFT (forward or inverse).
    fn fft_in_place(buf: &mut [Complex<Self>], inverse: bool);

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 is representable")
    }

    fn to_f64(self) -> f64 {
        <Self as num_traits::ToPrimitive>::to_f64(&self).expect("finite scalar")
    }
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr, $planner:ident) => {
        thread_local! {
            static $planner: std::cell::RefCell<FftPlanner<$t>> =
                std::cell::RefCell::new(FftPlanner::new());
        }

        impl Real for $t {
            const DTYPE: Dtype = $dtype;

            fn fft_in_place(buf: &mut [Complex<Self>], inverse: bool) {
                let plan = $planner.with(|p| {
                    let mut p = p.borrow_mut();
                    if inverse {
                        p.plan_fft_inverse(buf.len())
                    } else {
                        p.plan_fft_forward(buf.len())
                    }
                });
                plan.process(buf);
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("scalar width"))
            }
        }
    };
}

impl_real!(f64, Dtype::F64, PLANNER_F64);
impl_real!(f32, Dtype::F32, PLANNER_F32);

/// Dense tensor with a row-major logical layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, validating extents, length and finiteness.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() {
            return Err(Error::shape("tensor needs at least one axis"));
        }
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("shape {shape:?} needs {n} elements, got {}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite value at flat index {i}")));
        }
        Ok(Tensor { shape, data })
    }

    /// Wraps the result of an operation, reporting any non-finite output.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: &str) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("{op} produced a non-finite value at {i}")));
        }
        Ok(Tensor { shape, data })
    }

    /// Unchecked constructor for values that are finite by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Tensor { shape, data }
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(value.is_finite(), "fill value must be finite");
        assert!(!shape.is_empty() && shape.iter().all(|&e| e > 0), "bad shape {shape:?}");
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Callers must keep entries finite.
    pub(crate) fn data_mut(&mut self) -> &mut [T] {
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(C, H, W)` extents of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!("expected a [C,H,W] tensor, got {:?}", self.shape))),
        }
    }

    pub fn expect_vector(&self) -> Result<usize> {
        match self.shape[..] {
            [n] => Ok(n),
            _ => Err(Error::shape(format!("expected a vector, got {:?}", self.shape))),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * e + i;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::from_op(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect(), "map")
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{op}: shape {:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::from_op(self.shape.clone(), data, op)
    }

    /// Concatenates along axis 0; all trailing extents must agree.
    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape(format!("concat: trailing extents {:?} vs {:?}", &p.shape[1..], tail)));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Ok(Self::from_parts(shape, data))
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("dot: shape mismatch"));
        }
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn norm2(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect() }
    }
}
