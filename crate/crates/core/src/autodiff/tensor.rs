use crate::autodiff::Real;
use crate::error::{shape_err, Result};

/// Dense row-major array, either `(N, C, H, W)` or `(N, D)` (other ranks are allowed
/// for parameters such as biases and conv kernels).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err(
                "tensor",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            );
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => shape_err(op, format!("expected (N,C,H,W), got {:?}", self.shape)),
        }
    }

    /// `(n, d)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, d] => Ok((n, d)),
            _ => shape_err(op, format!("expected (N,D), got {:?}", self.shape)),
        }
    }

    /// Batch size and per-sample "channel" count: dim 0 and dim 1, with everything after
    /// dim 1 treated as a flattened spatial extent.
    pub(crate) fn ncp(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        if self.shape.len() < 2 {
            return shape_err(op, format!("expected rank >= 2, got {:?}", self.shape));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2..].iter().product()))
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}
