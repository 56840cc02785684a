use std::sync::Arc;

use rand::Rng as _;

use super::tape::{Gradients, Tape, Var};
use crate::{CieError, Matrix, Result, Rng};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A trainable matrix together with its accumulated gradient.
///
/// `grad` always has the shape of `data` and starts at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub data: Matrix,
    pub grad: Matrix,
    has_grad: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, data: Matrix) -> Self {
        let grad = Matrix::zeros(data.dim());
        Self {
            name: name.into(),
            data,
            grad,
            has_grad: false,
        }
    }

    pub fn has_grad(&self) -> bool {
        self.has_grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
        self.has_grad = false;
    }
}

/// Ordered collection of parameters owned by a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, data: Matrix) -> ParamId {
        self.params.push(Param::new(name, data));
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform initialised `rows×cols` parameter.
    pub fn add_glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut Rng) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit));
        self.add(name, data)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Param::zero_grad);
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.data.clone())).collect(),
        }
    }

    /// Adds the gradients of bound leaves into each parameter's `grad`.
    /// Parameters that did not take part in the loss receive zeros.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        if bound.vars.len() != self.params.len() {
            return Err(CieError::Contract(format!(
                "binding covers {} parameters, set has {}",
                bound.vars.len(),
                self.params.len()
            )));
        }
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.wrt(v) {
                p.grad += g;
            }
            p.has_grad = true;
        }
        Ok(())
    }

    /// Runs the backward sweep from `loss` and accumulates into `grad`.
    pub fn backward(&mut self, tape: &Tape, loss: Var, bound: &Bound) -> Result<()> {
        let grads = tape.backward(loss)?;
        self.accumulate(bound, &grads)
    }

    /// Flattens every parameter's data into one vector (row-major, in
    /// insertion order).
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    pub fn flatten_grads(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.grad.iter().copied()).collect()
    }
}

/// Tape variables for every parameter of a [`ParamSet`], in order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Inverted dropout: in training each entry is zeroed with probability `p`
/// and survivors are scaled by `1/(1 − p)`; otherwise identity.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var> {
    let mask = dropout_mask(tape.shape(x), p, training, rng)?;
    match mask {
        Some(m) => tape.mul_const(x, Arc::new(m)),
        None => Ok(x),
    }
}

/// Mask used by [`dropout`]; `None` when dropout is the identity.
pub fn dropout_mask(
    shape: (usize, usize),
    p: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<Option<Matrix>> {
    if !(0.0..1.0).contains(&p) {
        return Err(CieError::Parameter(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    if !training || p == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 / (1.0 - p);
    Ok(Some(Matrix::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    })))
}
