//! Named parameter storage and deterministic initialization.

use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// An ordered collection of named `f64` tensors.
///
/// Insertion order is preserved and defines the serialization order of
/// checkpoints, so identical construction yields identical files.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    order: Vec<String>,
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under a unique name.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.order.push(name.to_string());
        self.map.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    /// Parameter names in insertion order.
    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn tensor_count(&self) -> usize {
        self.order.len()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Bind every parameter into a graph as a gradient-tracking leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        let mut vars = BTreeMap::new();
        for name in &self.order {
            let v = graph.param(self.map[name].clone());
            vars.insert(name.clone(), v);
        }
        BoundParams { vars }
    }
}

/// Graph handles for every parameter of a [`ParamStore`].
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Wrap an explicit name → handle table (used to bind parameters as
    /// non-differentiable constants during inference).
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        BoundParams { vars }
    }

    /// Handle for a parameter; panics on unknown names since forward code
    /// and initialization share the same name table by construction.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} was never initialized"))
    }

    /// Collect gradients accumulated by the last backward pass. Parameters
    /// the loss does not reach get zero gradients of the right shape.
    pub fn grads(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = match graph.grad(v) {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(graph.value(v).raw_dim()),
                };
                (name.clone(), g)
            })
            .collect()
    }
}

/// He-normal initialization: `N(0, sqrt(2 / fan_in))`, for tensors feeding
/// ReLU activations.
pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let sigma = (2.0 / fan_in as f64).sqrt();
    normal(rng, shape, sigma)
}

/// Xavier-uniform initialization: `U(±sqrt(6 / (fan_in + fan_out)))`, for
/// linear projections.
pub fn xavier_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid uniform bounds");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Gaussian initialization with the given standard deviation.
pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], sigma: f64) -> Tensor {
    let dist = Normal::new(0.0, sigma).expect("valid normal parameters");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Tensor {
    Tensor::ones(IxDyn(shape))
}
