use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RandomStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// An ordered list of named tensors. Models, gradients and optimizer moments
/// all share one layout so they can be zipped tensor by tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

/// Initialization rule recorded next to each registered tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Zero,
    /// Gaussian with std `1/sqrt(fan_in)`.
    FanIn(usize),
}

impl ParamSet {
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn fill(&mut self, value: f64) {
        self.tensors.iter_mut().for_each(|t| t.data.fill(value));
    }

    pub fn scale(&mut self, k: f64) {
        self.tensors
            .iter_mut()
            .for_each(|t| t.data.iter_mut().for_each(|x| *x *= k));
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(0.0, |m: f64, x| m.max(x.abs()))
    }

    /// Errors unless names and shapes agree tensor by tensor.
    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::ShapeMismatch {
                name: format!("<{} vs {} tensors>", self.tensors.len(), other.tensors.len()),
            });
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape || a.data.len() != b.data.len() {
                return Err(Error::ShapeMismatch { name: a.name.clone() });
            }
        }
        Ok(())
    }
}

/// Builder that hands out tensor indices while recording init rules.
#[derive(Debug, Default)]
pub(crate) struct Registry {
    pub params: ParamSet,
    pub inits: Vec<Init>,
}

impl Registry {
    pub fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.params.tensors.push(Tensor::zeros(name, shape));
        self.inits.push(init);
        self.params.tensors.len() - 1
    }

    pub fn initialize(&mut self, stream: &mut RandomStream) {
        for (t, init) in self.params.tensors.iter_mut().zip(&self.inits) {
            match *init {
                Init::Zero => t.data.fill(0.0),
                Init::FanIn(fan_in) => {
                    let std = 1.0 / (fan_in as f64).sqrt();
                    t.data
                        .iter_mut()
                        .for_each(|x| *x = std * stream.next_standard_normal());
                }
            }
        }
    }
}
