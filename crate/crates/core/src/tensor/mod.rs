//! Minimal n-dimensional array engine with reverse-mode differentiation.
//!
//! [`Tensor`] is the plain storage type (row-major values plus a shape) used
//! for parameters, images and batches. Differentiable computation happens on
//! a [`graph::Graph`], an append-only tape whose nodes own their value and,
//! where needed, an accumulated gradient buffer.

pub mod attention;
pub mod gradcheck;
pub mod graph;
pub(crate) mod kernels;

use std::fmt;
use std::iter::Sum;

use crate::error::{CoreError, Result};
use crate::rng::Rng;

/// Scalar element type of the engine. Single precision is the default for
/// training and sampling; the double instantiation exists for gradient and
/// oracle checks.
pub trait Element:
    num_traits::Float + Send + Sync + fmt::Debug + fmt::Display + Default + Sum + 'static
{
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidArgument {
                op: "tensor",
                msg: format!("zero extent in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::InvalidArgument {
                op: "tensor",
                msg: format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Standard normal entries.
    pub fn randn(shape: impl Into<Vec<usize>>, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| T::from_f64(rng.gaussian())).collect();
        Tensor { shape, data }
    }

    /// Kaiming-style fan-in scaled normal init: `N(0, 1/fan_in)`.
    pub fn kaiming(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / fan_in.max(1) as f64).sqrt();
        let shape = shape.into();
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(rng.gaussian() * std))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interpret as `[N, C, H, W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(CoreError::InvalidArgument {
                op: "dims4",
                msg: format!("expected rank-4 shape, got {other:?}"),
            }),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Elementwise `a*sa + b*sb`; shapes must match.
    pub fn axpby(a: &Tensor<T>, sa: T, b: &Tensor<T>, sb: T) -> Result<Tensor<T>> {
        if a.shape != b.shape {
            return Err(CoreError::ShapeMismatch {
                op: "axpby",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| x * sa + y * sb)
            .collect();
        Ok(Tensor {
            shape: a.shape.clone(),
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn axpby_combines_elementwise() {
        let a = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![3], vec![10.0, 20.0, 30.0]).unwrap();
        let c = Tensor::axpby(&a, 2.0, &b, 0.5).unwrap();
        assert_eq!(c.data(), &[7.0, 14.0, 21.0]);
        let bad = Tensor::<f64>::zeros(vec![2]);
        assert!(Tensor::axpby(&a, 1.0, &bad, 1.0).is_err());
    }

    #[test]
    fn kaiming_scale_tracks_fan_in() {
        let mut rng = Rng::new(3);
        let t = Tensor::<f64>::kaiming(vec![64, 64], 64, &mut rng);
        let var: f64 =
            t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        assert!((var - 1.0 / 64.0).abs() < 0.005, "var {var}");
    }
}
