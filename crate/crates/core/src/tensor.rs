//! Dense row-major tensors.
//!
//! Values are immutable once produced: the flat buffer sits behind an `Arc`
//! so tensors clone cheaply and reshapes share storage.

use std::sync::Arc;

use crate::error::TensorError;
use crate::scalar::Scalar;

/// Extents of a tensor, outermost first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Self {
        Shape(dims.to_vec())
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    /// Render as `[a, b, c]`, matching the layout tables in reports.
    pub fn display(&self) -> String {
        let inner: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        format!("[{}]", inner.join(", "))
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.display())
    }
}

/// Dense N-dimensional array in row-major order.
#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let shape = Shape::new(shape);
        if shape.numel() != data.len() {
            return Err(TensorError::ShapeMismatch {
                context: "tensor construction".into(),
                expected: format!("{} elements for shape {}", shape.numel(), shape),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: Shape::new(shape),
            data: Arc::new(vec![T::zero(); n]),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: Shape::new(shape),
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::new(&[]),
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Shared handle to the flat buffer.
    pub fn storage(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    /// New view with the same element count and storage.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let new_shape = Shape::new(shape);
        if new_shape.numel() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                context: "reshape".into(),
                expected: format!("{} elements", self.numel()),
                got: format!("shape {} with {} elements", new_shape, new_shape.numel()),
            });
        }
        Ok(Tensor {
            shape: new_shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1 && self.shape.rank() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert elementwise to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data: Vec<U> = self.data.iter().map(|v| U::from_f64(v.to_f64())).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }
}
