//! Dense row-major tensors over `f64`.
//!
//! A `Tensor` is a shape plus a contiguous buffer; the last axis varies
//! fastest. Differentiable computation happens on the [`crate::tape`],
//! which stores tensors by value — this type carries no graph edges of
//! its own, only the `requires_grad` marker that the tape reads when a
//! tensor is registered as a leaf.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{fmt_shape, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Whether the tape should allocate a gradient slot for this tensor
    /// when it is registered as a leaf.
    pub requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a shape and a row-major buffer.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(alloc::format!(
                "shape {} implies {} elements but buffer holds {}",
                fmt_shape(shape),
                numel,
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false }
    }

    /// A rank-1 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value], requires_grad: false }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Marks the tensor as a gradient leaf (builder style).
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Element access by multi-index; panics on a rank or bounds error.
    /// Intended for tests and small fixtures, not inner loops.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    /// Mutable element access by multi-index (same contract as [`at`]).
    ///
    /// [`at`]: Tensor::at
    pub fn at_mut(&mut self, index: &[usize]) -> &mut f64 {
        let off = self.offset(index);
        &mut self.data[off]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(
            index.len(),
            self.shape.len(),
            "index rank {} does not match tensor rank {}",
            index.len(),
            self.shape.len()
        );
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of extent {dim}");
            off = off * dim + ix;
        }
        off
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns the same buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dim(alloc::format!(
                "cannot reshape {} ({} elements) to {} ({} elements)",
                fmt_shape(&self.shape),
                self.data.len(),
                fmt_shape(shape),
                numel
            )));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone(), requires_grad: self.requires_grad })
    }

    /// Elementwise sum of two same-shape tensors (plain, not taped).
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dim(alloc::format!(
                "add expects equal shapes, got {} and {}",
                fmt_shape(&self.shape),
                fmt_shape(&other.shape)
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data, requires_grad: false })
    }

    /// Transpose of a rank-2 tensor (plain, not taped).
    pub fn transposed(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::Dim(alloc::format!(
                "transpose expects rank 2, got {}",
                fmt_shape(&self.shape)
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    /// Maximum absolute difference against another tensor of equal shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dim(alloc::format!(
                "compare expects equal shapes, got {} and {}",
                fmt_shape(&self.shape),
                fmt_shape(&other.shape)
            )));
        }
        let mut m = 0.0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = crate::math::abs(a - b);
            if d > m {
                m = d;
            }
        }
        Ok(m)
    }
}
