//! Named parameter storage, initialisation, graph binding and the Adam
//! optimiser.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Slope used by every leaky-ReLU in the networks.
pub const LEAK: f64 = 0.1;

/// Named tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params<F: Real = f32> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> Params<F> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn extend(&mut self, other: Params<F>) {
        self.tensors.extend(other.tensors);
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Params<F> {
        Params {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks that `self` has exactly the names and shapes of `reference`.
    pub fn check_compatible(&self, reference: &Params<F>) -> Result<()> {
        for (name, t) in &reference.tensors {
            match self.tensors.get(name) {
                None => {
                    return Err(Error::Checkpoint(format!("missing parameter {name}")));
                }
                Some(v) if v.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, config expects {:?}",
                        v.shape(),
                        t.shape()
                    )));
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !reference.tensors.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Adds every tensor to `graph`, as gradient leaves when `trainable`.
    pub fn bind<'g>(&self, graph: &'g Graph<F>, trainable: bool) -> Bound<'g, F> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    graph.leaf(v.clone())
                } else {
                    graph.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { graph, vars }
    }
}

/// Parameters bound into a graph.
pub struct Bound<'g, F: Real> {
    graph: &'g Graph<F>,
    vars: BTreeMap<String, Var>,
}

impl<'g, F: Real> Bound<'g, F> {
    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn conv2d(&self, name: &str, x: Var) -> Var {
        self.graph.conv2d(
            x,
            self.var(&format!("{name}.w")),
            self.try_var(&format!("{name}.b")),
        )
    }

    pub fn conv3d(&self, name: &str, x: Var) -> Var {
        self.graph.conv3d(
            x,
            self.var(&format!("{name}.w")),
            self.try_var(&format!("{name}.b")),
        )
    }

    pub fn linear(&self, name: &str, x: Var) -> Var {
        self.graph.linear(
            x,
            self.var(&format!("{name}.w")),
            self.try_var(&format!("{name}.b")),
        )
    }

    /// Gradients of every bound parameter (zeros where none flowed).
    pub fn gradients(&self, grads: &mut Gradients<F>) -> Params<F> {
        let mut out = Params::new();
        for (name, &var) in &self.vars {
            let g = grads
                .take(var)
                .unwrap_or_else(|| Tensor::zeros(&self.graph.shape(var)));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Registers layer parameters with their initialisation.
pub struct ParamBuilder<'r, R: Rng> {
    rng: &'r mut R,
    params: Params<f32>,
}

impl<'r, R: Rng> ParamBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            rng,
            params: Params::new(),
        }
    }

    fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Tensor<f32> {
        let gain = (2.0 / (1.0 + LEAK * LEAK)).sqrt();
        let bound = (gain * (3.0 / fan_in as f64).sqrt()) as f32;
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound))
    }

    pub fn weight(&mut self, name: &str, shape: &[usize], zero: bool) {
        let fan_in: usize = shape[1..].iter().product();
        let w = if zero {
            Tensor::zeros(shape)
        } else {
            self.kaiming(shape, fan_in)
        };
        self.params.insert(format!("{name}.w"), w);
    }

    pub fn bias(&mut self, name: &str, len: usize) {
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[len]));
    }

    pub fn conv2d(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.weight(name, &[cout, cin, k, k], false);
        self.bias(name, cout);
    }

    pub fn conv3d(&mut self, name: &str, cin: usize, cout: usize, kt: usize, k: usize) {
        self.weight(name, &[cout, cin, kt, k, k], false);
        self.bias(name, cout);
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) {
        self.weight(name, &[fan_out, fan_in], false);
        if bias {
            self.bias(name, fan_out);
        }
    }

    pub fn finish(self) -> Params<f32> {
        self.params
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Params<f32>,
    pub v: Params<f32>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Params::new(),
            v: Params::new(),
        }
    }

    pub fn update(&mut self, params: &mut Params<f32>, grads: &Params<f32>) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = (c.lr * bc2.sqrt() / bc1) as f32;
        let eps = (c.eps * bc2.sqrt()) as f32;
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            if self.m.get(name).is_none() {
                self.m.insert(name.clone(), Tensor::zeros(g.shape()));
                self.v.insert(name.clone(), Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(name).expect("inserted").data_mut();
            for (mi, &gi) in m.iter_mut().zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            }
            let v = self.v.get_mut(name).expect("inserted").data_mut();
            for (vi, &gi) in v.iter_mut().zip(g.data()) {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let m = self.m.get(name).expect("inserted").data();
            let v = self.v.get(name).expect("inserted").data();
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                *pi -= step_size * mi / (vi.sqrt() + eps);
            }
        }
    }
}
