use std::fmt;

use rand_distr::{Distribution, StandardNormal};

use super::{Real, Rng};
use crate::error::{Error, Result};

/// Dense row-major n-dimensional array with an optional gradient buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = numel(&shape);
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(
                "tensor",
                format!("zero extent in shape {shape:?}"),
            ));
        }
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Like [`Tensor::new`] but rejects NaN and infinities.
    pub fn new_finite(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.check_finite("tensor")?;
        Ok(t)
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![v; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng.inner_mut());
                T::lit(z * std)
            })
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape))
            .map(|_| T::lit((rng.uniform() * 2.0 - 1.0) * bound))
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Converts to another precision; gradient state is dropped.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite {
                context: format!("{context} (flat index {i} of shape {:?})", self.shape),
            }),
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.data.len());
        match self.grad.as_mut() {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g = *g + *d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<&T> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("requires_grad", &self.requires_grad)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Sinusoidal features `[sin(p * f_i) .., cos(p * f_i) ..]` with log-spaced
/// frequencies `f_i = max_period^(-i / half)`; `dim` must be even.
pub fn sinusoidal_features<T: Real>(
    positions: &[f64],
    dim: usize,
    max_period: f64,
) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(
            "sinusoidal_features",
            format!("dim {dim} must be even and positive"),
        ));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        let freqs = (0..half).map(|i| (-(max_period.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| p * f).collect();
        data.extend(args.iter().map(|a| T::lit(a.sin())));
        data.extend(args.iter().map(|a| T::lit(a.cos())));
    }
    Tensor::new(vec![positions.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert_eq!(
            Tensor::<f64>::new(vec![2, 3], vec![0.0; 6])
                .unwrap()
                .numel(),
            6
        );
    }

    #[test]
    fn non_finite_is_rejected() {
        let err = Tensor::<f32>::new_finite(vec![2], vec![1.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn sinusoid_at_zero() {
        let t = sinusoidal_features::<f64>(&[0.0], 8, 10_000.0).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
    }
}
