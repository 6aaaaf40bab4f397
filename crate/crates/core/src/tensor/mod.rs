//! Minimal dense tensor engine.
//!
//! Tensors are row-major `f64` buffers. Differentiation is reverse-mode over a
//! [`Tape`] that records one node per operation; model parameters live outside
//! the tape and are copied in as leaves for every forward pass.

mod checkpoint;
pub(crate) mod kernels;
mod optim;
mod tape;

pub use checkpoint::{load_tensors, read_tensors, save_tensors, write_tensors, CHECKPOINT_MAGIC};
pub use optim::{AdamConfig, AdamState, Optimizer, OptimizerKind};
pub use tape::{ConvGeom, Gradients, Tape, Var};

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Dimension {
        op,
        detail: detail.into(),
    }
}

/// A dense row-major tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            grad: None,
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
            grad: None,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    /// Kaiming-uniform initialization with bound `sqrt(6 / fan_in)`.
    pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        Self::uniform(shape, -bound, bound, rng)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), TensorError> {
        if grad.len() != self.data.len() {
            return Err(dim_err(
                "set_grad",
                format!("gradient has {} elements, tensor {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Gathers slices along the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let stride: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Depth-to-space rearrangement of a `[C*r*r, H, W]` or `[B, C*r*r, H, W]` tensor.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor, TensorError> {
        let (b, c, h, w) = kernels::split_image_shape(&self.shape, "pixel_shuffle")?;
        if r == 0 || c % (r * r) != 0 {
            return Err(dim_err(
                "pixel_shuffle",
                format!("{c} channels not divisible by r^2 = {}", r * r),
            ));
        }
        let data = kernels::pixel_shuffle(&self.data, b, c, h, w, r);
        let oc = c / (r * r);
        let shape = if self.rank() == 3 {
            vec![oc, h * r, w * r]
        } else {
            vec![b, oc, h * r, w * r]
        };
        Tensor::new(shape, data)
    }

    /// Inverse of [`Tensor::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor, TensorError> {
        let (b, c, h, w) = kernels::split_image_shape(&self.shape, "pixel_unshuffle")?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(dim_err(
                "pixel_unshuffle",
                format!("spatial dims {h}x{w} not divisible by {r}"),
            ));
        }
        let data = kernels::pixel_unshuffle(&self.data, b, c, h / r, w / r, r);
        let shape = if self.rank() == 3 {
            vec![c * r * r, h / r, w / r]
        } else {
            vec![b, c * r * r, h / r, w / r]
        };
        Tensor::new(shape, data)
    }
}
