use crate::error::{Error, Result};

/// Dense row-major `f64` array with an attached gradient slot.
///
/// Parameters live in `Tensor`s outside any tape; a forward pass copies them
/// onto a [`Tape`](super::Tape) as leaves and [`Tape::accumulate_grad`](super::Tape::accumulate_grad)
/// adds the reverse-mode result back into `grad`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Constant tensor (`requires_grad == false`).
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} holds {} values, got {}", shape, numel(&shape), values.len()),
            ));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("tensor construction ({bad})"),
            });
        }
        let grad = vec![0.0; values.len()];
        Ok(Tensor {
            shape,
            values,
            grad,
            requires_grad: false,
        })
    }

    /// Trainable tensor (`requires_grad == true`).
    pub fn param(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let mut t = Tensor::new(shape, values)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable view of the values. Callers are responsible for keeping them finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.values.len() == 1).then(|| self.values[0])
    }

    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>, grad: Vec<f64>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), values.len());
        debug_assert_eq!(values.len(), grad.len());
        Tensor {
            shape,
            values,
            grad,
            requires_grad,
        }
    }
}
