use crate::error::{Error, Result};

/// Dense row-major n-dimensional array of `f64`, optionally carrying a
/// gradient buffer of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Input(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    /// Marks the tensor as a gradient-requiring leaf with a zeroed grad.
    pub fn requiring_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.values.len()]);
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Split borrow of the values (mutable) and the gradient.
    pub fn values_and_grad_mut(&mut self) -> (&mut [f64], Option<&[f64]>) {
        (&mut self.values, self.grad.as_deref())
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Adds `delta` into the gradient buffer. No-op on tensors that do not
    /// require gradients.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if let Some(grad) = self.grad.as_mut() {
            if grad.len() != delta.len() {
                return Err(Error::Dimension {
                    op: "accumulate_grad",
                    lhs: self.shape.clone(),
                    rhs: vec![delta.len()],
                });
            }
            for (g, d) in grad.iter_mut().zip(delta) {
                *g += d;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(grad) = self.grad.as_mut() {
            grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.values.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }
}
