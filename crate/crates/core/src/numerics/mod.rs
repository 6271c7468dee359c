//! Dense tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value: a shape, a flat row-major `f64` buffer, and
//! an optional gradient slot. All learned math goes through [`Graph`], a
//! tape of recorded primitive ops replayed in reverse by
//! [`Graph::backward`]. [`finite_diff_grad`] is the independent
//! central-difference oracle used to check every analytic gradient.

mod finite_diff;
mod graph;

pub use finite_diff::{finite_diff_grad, max_rel_err};
pub use graph::{Gradients, Graph, NodeId};

use crate::error::{Error, Result};

/// Dense n-dimensional array of 64-bit reals with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Build a tensor from a shape and flat row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                context: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    /// 2-D convenience constructor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Contract("ragged rows in Tensor::from_rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn wants_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Replace the gradient slot; length must match the data buffer.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape {
                context: "Tensor::set_grad",
                lhs: vec![self.data.len()],
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Entry of a 2-D tensor.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }
}

/// Numerically stabilized softmax along `axis`; each slice sums to 1.
///
/// Pure value-level form; the recorded (differentiable) variant lives on
/// [`Graph`].
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape.len() {
        return Err(Error::Contract(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape
        )));
    }
    let mut out = x.clone();
    out.grad = None;
    out.requires_grad = false;
    // Iterate every 1-D lane along `axis`: outer runs over leading dims,
    // inner over trailing dims; lane entries are strided by `stride`.
    let extent = x.shape[axis];
    let stride: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..stride {
            let base = o * extent * stride + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..extent {
                max = max.max(x.data[base + k * stride]);
            }
            let mut sum = 0.0;
            for k in 0..extent {
                let e = (x.data[base + k * stride] - max).exp();
                out.data[base + k * stride] = e;
                sum += e;
            }
            for k in 0..extent {
                out.data[base + k * stride] /= sum;
            }
        }
    }
    Ok(out)
}
