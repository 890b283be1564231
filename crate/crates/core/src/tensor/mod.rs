//! Dense row-major tensors and the reverse-mode autodiff engine used to
//! train the calibration network.
//!
//! Tensors are generic over their element type so the same graph code can be
//! run in `f64` for finite-difference gradient checks; everything else in the
//! crate uses the `f32` default.

mod adam;
mod graph;
mod kernels;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Op, Var};

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

/// Maximum supported rank.
pub const MAX_RANK: usize = 4;

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    num_traits::Float + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major array with rank 1 to 4. Four-dimensional tensors follow
/// the N, C, H, W convention.
#[derive(Clone, PartialEq)]
pub struct Tensor<F: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::shape(format!(
            "rank must be 1..={MAX_RANK}, got {:?}",
            shape
        )));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("zero extent in {:?}", shape)));
    }
    Ok(shape.iter().product())
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: F) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, F::zero())
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A 1×1×H×W plane.
    pub fn plane(height: usize, width: usize, data: Vec<F>) -> Result<Self> {
        Self::new(&[1, 1, height, width], data)
    }

    pub(crate) fn zeros_like(other: &Self) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![F::zero(); other.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// True when every extent is 1.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    /// Interprets the shape as N×C×H×W, rejecting other ranks.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::shape(format!(
                "expected a rank-4 NCHW tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts the element type.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }

    /// Sum with 64-bit accumulation.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        self.sum_f64() / self.data.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn rejects_zero_extent_and_rank() {
        assert!(Tensor::<f32>::zeros(&[1, 0, 2]).is_err());
        assert!(Tensor::<f32>::zeros(&[]).is_err());
        assert!(Tensor::<f32>::zeros(&[1, 1, 1, 1, 1]).is_err());
    }

    #[test]
    fn dims4_requires_rank_four() {
        let t = Tensor::<f32>::zeros(&[1, 2, 3, 4]).unwrap();
        assert_eq!(t.dims4().unwrap(), [1, 2, 3, 4]);
        assert!(Tensor::<f32>::zeros(&[4]).unwrap().dims4().is_err());
    }
}
