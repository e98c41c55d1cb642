//! Dense row-major tensors and shared trainable parameters.
//!
//! A [`Tensor`] is a plain n-dimensional array of `f32` with an optional
//! gradient buffer of the same shape. All network math in this crate runs on
//! these; reductions accumulate in `f64` and round once at the end.

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dim(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor { shape: vec![1], data: vec![value], grad: None, requires_grad: false }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Allocate (or keep) the gradient buffer.
    pub fn ensure_grad(&mut self) -> &mut Vec<f32> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Reset the gradient to zeros, allocating the buffer if absent, so a
    /// parameter untouched by the next backward pass still carries an
    /// explicit zero gradient.
    pub fn zero_grad(&mut self) {
        let n = self.data.len();
        match self.grad.as_mut() {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; n]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Role of a parameter; biases are initialized to zero, weights from a
/// seeded Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// A named trainable tensor shared between a model, the recording graph and
/// an optimizer. Gradients accumulate into the inner tensor's `grad` buffer
/// across `backward` calls until `zero_grad`.
#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    inner: Rc<RefCell<Tensor>>,
}

impl Param {
    pub fn new(name: impl Into<String>, kind: ParamKind, mut tensor: Tensor) -> Param {
        tensor.requires_grad = true;
        Param { name: name.into(), kind, inner: Rc::new(RefCell::new(tensor)) }
    }

    pub fn borrow(&self) -> Ref<'_, Tensor> {
        self.inner.borrow()
    }

    pub fn borrow_mut(&self) -> RefMut<'_, Tensor> {
        self.inner.borrow_mut()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().numel()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().zero_grad();
    }

    pub(crate) fn share(&self) -> Rc<RefCell<Tensor>> {
        Rc::clone(&self.inner)
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let t = self.inner.borrow();
        write!(f, "Param({} {:?} shape={:?})", self.name, self.kind, t.shape)
    }
}
