//! Dense planar tensors and a define-by-run reverse-mode differentiation tape.
//!
//! Every tensor is three-dimensional, `(channels, height, width)`, stored
//! row-major. Scalars are `(1, 1, 1)` and flat vectors are `(n, 1, 1)`.
//! Images enter the tape through [`ImageTensor::to_planar`] and gradients
//! leave it through [`ImageTensor::from_planar`].

mod graph;
mod image;
mod kernels;

use std::fmt;

use thiserror::Error;

pub use self::graph::{Adjoints, Axis, ConvKernel, Graph, Padding, Var};
pub use self::image::ImageTensor;
pub(crate) use self::graph::logistic;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("data length {len} does not match shape {shape}")]
    DataLength { shape: Shape, len: usize },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("expected a scalar root, got shape {0}")]
    NonScalarRoot(Shape),
    #[error("node {0} is not reachable from the differentiated root")]
    Unreachable(usize),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape::new(1, 1, 1);

    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn vector(len: usize) -> Self {
        Self::new(len, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Broadcast result of two shapes: each axis must match or be 1 on one side.
    pub fn broadcast(op: &'static str, lhs: Shape, rhs: Shape) -> Result<Shape> {
        fn axis(a: usize, b: usize) -> Option<usize> {
            if a == b || b == 1 {
                Some(a)
            } else if a == 1 {
                Some(b)
            } else {
                None
            }
        }
        match (
            axis(lhs.channels, rhs.channels),
            axis(lhs.height, rhs.height),
            axis(lhs.width, rhs.width),
        ) {
            (Some(c), Some(h), Some(w)) => Ok(Shape::new(c, h, w)),
            _ => Err(TensorError::ShapeMismatch { op, lhs, rhs }),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}x{}x{}]", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() == 0 {
            return Err(TensorError::InvalidShape(format!("empty shape {shape}")));
        }
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(Shape::vector(values.len()), values)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::NonScalarRoot(self.shape))
        }
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    /// `self + k * other`, same shape required.
    pub fn axpy(&self, k: f64, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "axpy",
                lhs: self.shape,
                rhs: other.shape,
            });
        }
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + k * b)
                .collect(),
        })
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                lhs: self.shape,
                rhs: other.shape,
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
