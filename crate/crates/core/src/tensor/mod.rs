//! Value-semantic N-dimensional arrays and the differentiable operations the
//! prediction network is built from.

mod element;
pub mod graph;
pub mod ops;

pub use element::Element;
pub use graph::{Gradients, Graph, Var};
pub use ops::{ConvSpec, Padding};

use crate::error::{shape_err, Result};

/// Contiguous row-major array. Activations use N×C×H×W layout; kernels use
/// Cout×Cin×Kh×Kw (Cin×Cout×Kh×Kw for transposed convolutions).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "dims {:?} need {} elements, buffer has {}",
                dims,
                n,
                data.len()
            ));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
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

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Returns (N, C, H, W) for a rank-4 tensor.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => shape_err(format!("expected N×C×H×W, got {:?}", self.dims)),
        }
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {:?}", self.dims, dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return shape_err(format!(
                "elementwise dims differ: {:?} vs {:?}",
                self.dims, other.dims
            ));
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Adds `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return shape_err(format!(
                "accumulate dims differ: {:?} vs {:?}",
                self.dims, other.dims
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if self.dims != other.dims {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())),
        )
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.dims != other.dims {
            return shape_err("dot dims differ");
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Selects sample `n` of an N×… tensor as a 1×… tensor.
    pub fn sample(&self, n: usize) -> Result<Self> {
        let batch = *self.dims.first().unwrap_or(&0);
        if n >= batch {
            return shape_err(format!("sample {} out of batch {}", n, batch));
        }
        let per = self.data.len() / batch;
        let mut dims = self.dims.clone();
        dims[0] = 1;
        Ok(Self {
            dims,
            data: self.data[n * per..(n + 1) * per].to_vec(),
        })
    }

    /// Stacks 1×… tensors (or N×… tensors) along the leading axis.
    pub fn stack_batch(parts: &[Self]) -> Result<Self> {
        let first = match parts.first() {
            Some(p) => p,
            None => return shape_err("cannot stack an empty list"),
        };
        let tail = &first.dims[1..];
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.dims[1..] != tail {
                return shape_err(format!("stack dims differ: {:?} vs {:?}", first.dims, p.dims));
            }
            n += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        let mut dims = first.dims.clone();
        dims[0] = n;
        Ok(Self { dims, data })
    }
}
