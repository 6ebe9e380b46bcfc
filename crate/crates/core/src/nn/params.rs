use serde::{Deserialize, Serialize};

use super::tape::{Grads, Tape, Var};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Named parameter tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Registers a tensor and returns its index.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Pushes every tensor as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Pushes every tensor as a constant, for inference.
    pub fn bind_const(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Gradients for the bound parameters, zero where unreachable.
    pub fn collect_grads(&self, grads: &Grads, vars: &[Var]) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, &v)| grads.get_or_zeros(v, t))
            .collect()
    }

    /// Sum of squares over every parameter.
    pub fn sum_squares(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flat_map(|t| t.data()).all(|v| v.is_finite())
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        let same = self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::Shape {
                op: "params",
                detail: "parameter names or shapes differ".into(),
            });
        }
        Ok(())
    }
}
