use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense row-major f64 tensor. All stored values are finite by construction;
/// a NaN or infinity is rejected eagerly rather than propagated.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, validating that the shape extents multiply to the
    /// data length and that every value is finite.
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor construction",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: "tensor construction".into(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![value], vec![1])
    }

    /// Seeded Gaussian fill, used for backbone and adapter A initialization.
    pub fn gaussian<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::Config(format!("invalid gaussian std {std}: {e}")))?;
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| normal.sample(rng)).collect();
        Tensor::new(data, shape)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a matrix; 1 for vectors.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Number of columns when viewed as a matrix; the length for vectors.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => self.data.len(),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    /// Replaces the stored values, keeping shape and grad flag. Used by the
    /// optimizer and by checkpoint restore; validates length and finiteness.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::Shape {
                op: "set_data",
                lhs: self.shape.clone(),
                rhs: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: "set_data".into(),
            });
        }
        self.data = data;
        Ok(())
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient accumulator, allocating it on first
    /// use. Only meaningful for `requires_grad` tensors.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Err(Error::Contract(
                "gradient accumulated into a tensor without requires_grad".into(),
            ));
        }
        if delta.len() != self.data.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }
}

/// Shared handle to a parameter tensor. Graph leaves hold clones of this
/// handle so that `backward` can write gradients back into the owner.
/// Single-threaded by design: a graph and its params stay on one thread.
#[derive(Clone, Debug)]
pub struct Param(Rc<RefCell<Tensor>>);

impl Param {
    pub fn new(tensor: Tensor) -> Self {
        Param(Rc::new(RefCell::new(tensor)))
    }

    /// Trainable parameter: sets `requires_grad` before wrapping.
    pub fn trainable(tensor: Tensor) -> Self {
        Param::new(tensor.with_requires_grad(true))
    }

    /// Frozen parameter.
    pub fn frozen(tensor: Tensor) -> Self {
        Param::new(tensor.with_requires_grad(false))
    }

    pub fn borrow(&self) -> Ref<'_, Tensor> {
        self.0.borrow()
    }

    pub fn borrow_mut(&self) -> RefMut<'_, Tensor> {
        self.0.borrow_mut()
    }

    pub fn ptr_eq(&self, other: &Param) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

/// A parameter with its canonical checkpoint key and an optimizer hint:
/// `decay` is set for weight matrices and cleared for biases and norm gains.
#[derive(Clone, Debug)]
pub struct NamedParam {
    pub name: String,
    pub param: Param,
    pub decay: bool,
}

impl NamedParam {
    pub fn new(name: impl Into<String>, param: Param, decay: bool) -> Self {
        NamedParam {
            name: name.into(),
            param,
            decay,
        }
    }
}
