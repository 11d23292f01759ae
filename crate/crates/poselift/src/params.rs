//! Named-tensor views over structured parameters.
//!
//! Model parameters live in plain structs (`Linear`, `BatchNorm`, ...). The
//! [`HasParams`] visitor gives every tensor a stable dotted name in a fixed
//! order, which is what the optimizer, the checkpoint writer and the
//! gradient checker key on. Buffers (batchnorm running statistics) are
//! enumerated with `trainable = false`: they are saved and loaded but never
//! receive gradient updates.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{GradMap, Graph, Value};
use crate::tensor::Tensor;

pub trait HasParams {
    /// Enumerate `(name, tensor, trainable)` in a fixed, deterministic order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, bool));
    /// Mutable twin of [`HasParams::visit`] with the same order.
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool));

    fn named_tensors(&self) -> Vec<(String, Tensor, bool)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t, trainable| {
            out.push((name.to_string(), t.clone(), trainable));
        });
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, trainable| {
            if trainable {
                n += t.len();
            }
        });
        n
    }

    /// Order-sensitive FNV-1a checksum over every tensor byte; used by tests
    /// to prove that shared parameters were not mutated.
    fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut mix = |byte: u8| {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        };
        self.visit("", &mut |name, t, _| {
            for b in name.bytes() {
                mix(b);
            }
            for v in t.data() {
                for b in v.to_le_bytes() {
                    mix(b);
                }
            }
        });
        hash
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Tracks which graph leaves correspond to which trainable parameters during
/// one forward pass.
#[derive(Default)]
pub struct ParamRegistry {
    entries: Vec<(String, Value)>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, name: String, value: Value) {
        self.entries.push((name, value));
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Pull the gradient for every registered parameter out of a backward
    /// pass. Parameters the loss never touched get zero gradients.
    pub fn collect(&self, graph: &Graph, grads: &GradMap) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, value) in &self.entries {
            let g = grads.get_or_zeros(*value, graph.value(*value).shape());
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Dense affine layer `y = W·x + b` with `W: [n_out, n_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn xavier(n_out: usize, n_in: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            w: Tensor::xavier(n_out, n_in, rng),
            b: Tensor::zeros(vec![n_out]),
        }
    }

    pub fn zeros(n_out: usize, n_in: usize) -> Self {
        Self {
            w: Tensor::zeros(vec![n_out, n_in]),
            b: Tensor::zeros(vec![n_out]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut ParamRegistry, prefix: &str, trainable: bool) -> LinearVars {
        let w = g.leaf(self.w.clone());
        let b = g.leaf(self.b.clone());
        if trainable {
            reg.record(join(prefix, "w"), w);
            reg.record(join(prefix, "b"), b);
        }
        LinearVars { w, b }
    }
}

impl HasParams for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        f(&join(prefix, "w"), &self.w, true);
        f(&join(prefix, "b"), &self.b, true);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        f(&join(prefix, "w"), &mut self.w, true);
        f(&join(prefix, "b"), &mut self.b, true);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub w: Value,
    pub b: Value,
}

/// Batch normalization parameters plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::filled(vec![features], 1.0),
            beta: Tensor::zeros(vec![features]),
            running_mean: Tensor::zeros(vec![features]),
            running_var: Tensor::filled(vec![features], 1.0),
        }
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut ParamRegistry, prefix: &str, trainable: bool) -> BatchNormVars {
        let gamma = g.leaf(self.gamma.clone());
        let beta = g.leaf(self.beta.clone());
        if trainable {
            reg.record(join(prefix, "gamma"), gamma);
            reg.record(join(prefix, "beta"), beta);
        }
        BatchNormVars { gamma, beta }
    }
}

impl HasParams for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        f(&join(prefix, "gamma"), &self.gamma, true);
        f(&join(prefix, "beta"), &self.beta, true);
        f(&join(prefix, "running_mean"), &self.running_mean, false);
        f(&join(prefix, "running_var"), &self.running_var, false);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        f(&join(prefix, "gamma"), &mut self.gamma, true);
        f(&join(prefix, "beta"), &mut self.beta, true);
        f(&join(prefix, "running_mean"), &mut self.running_mean, false);
        f(&join(prefix, "running_var"), &mut self.running_var, false);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNormVars {
    pub gamma: Value,
    pub beta: Value,
}

/// Gate parameters of a single LSTM cell, Graves-style, no peepholes.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub hidden: usize,
    pub w_i: Tensor,
    pub w_f: Tensor,
    pub w_o: Tensor,
    pub w_g: Tensor,
    pub u_i: Tensor,
    pub u_f: Tensor,
    pub u_o: Tensor,
    pub u_g: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
    pub b_g: Tensor,
}

impl LstmParams {
    /// Xavier weights; forget-gate bias starts at 1.0 to keep early memory
    /// open, all other biases zero.
    pub fn xavier(n_in: usize, hidden: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            hidden,
            w_i: Tensor::xavier(hidden, n_in, rng),
            w_f: Tensor::xavier(hidden, n_in, rng),
            w_o: Tensor::xavier(hidden, n_in, rng),
            w_g: Tensor::xavier(hidden, n_in, rng),
            u_i: Tensor::xavier(hidden, hidden, rng),
            u_f: Tensor::xavier(hidden, hidden, rng),
            u_o: Tensor::xavier(hidden, hidden, rng),
            u_g: Tensor::xavier(hidden, hidden, rng),
            b_i: Tensor::zeros(vec![hidden]),
            b_f: Tensor::filled(vec![hidden], 1.0),
            b_o: Tensor::zeros(vec![hidden]),
            b_g: Tensor::zeros(vec![hidden]),
        }
    }

    pub fn zeros(n_in: usize, hidden: usize) -> Self {
        Self {
            hidden,
            w_i: Tensor::zeros(vec![hidden, n_in]),
            w_f: Tensor::zeros(vec![hidden, n_in]),
            w_o: Tensor::zeros(vec![hidden, n_in]),
            w_g: Tensor::zeros(vec![hidden, n_in]),
            u_i: Tensor::zeros(vec![hidden, hidden]),
            u_f: Tensor::zeros(vec![hidden, hidden]),
            u_o: Tensor::zeros(vec![hidden, hidden]),
            u_g: Tensor::zeros(vec![hidden, hidden]),
            b_i: Tensor::zeros(vec![hidden]),
            b_f: Tensor::zeros(vec![hidden]),
            b_o: Tensor::zeros(vec![hidden]),
            b_g: Tensor::zeros(vec![hidden]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w_i.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut ParamRegistry, prefix: &str, trainable: bool) -> LstmVars {
        let leaf = |name: &str, t: &Tensor, g: &mut Graph, reg: &mut ParamRegistry| {
            let v = g.leaf(t.clone());
            if trainable {
                reg.record(join(prefix, name), v);
            }
            v
        };
        LstmVars {
            hidden: self.hidden,
            w_i: leaf("w_i", &self.w_i, g, reg),
            w_f: leaf("w_f", &self.w_f, g, reg),
            w_o: leaf("w_o", &self.w_o, g, reg),
            w_g: leaf("w_g", &self.w_g, g, reg),
            u_i: leaf("u_i", &self.u_i, g, reg),
            u_f: leaf("u_f", &self.u_f, g, reg),
            u_o: leaf("u_o", &self.u_o, g, reg),
            u_g: leaf("u_g", &self.u_g, g, reg),
            b_i: leaf("b_i", &self.b_i, g, reg),
            b_f: leaf("b_f", &self.b_f, g, reg),
            b_o: leaf("b_o", &self.b_o, g, reg),
            b_g: leaf("b_g", &self.b_g, g, reg),
        }
    }
}

impl HasParams for LstmParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        for (name, t) in [
            ("w_i", &self.w_i),
            ("w_f", &self.w_f),
            ("w_o", &self.w_o),
            ("w_g", &self.w_g),
            ("u_i", &self.u_i),
            ("u_f", &self.u_f),
            ("u_o", &self.u_o),
            ("u_g", &self.u_g),
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_o", &self.b_o),
            ("b_g", &self.b_g),
        ] {
            f(&join(prefix, name), t, true);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        for (name, t) in [
            ("w_i", &mut self.w_i),
            ("w_f", &mut self.w_f),
            ("w_o", &mut self.w_o),
            ("w_g", &mut self.w_g),
            ("u_i", &mut self.u_i),
            ("u_f", &mut self.u_f),
            ("u_o", &mut self.u_o),
            ("u_g", &mut self.u_g),
            ("b_i", &mut self.b_i),
            ("b_f", &mut self.b_f),
            ("b_o", &mut self.b_o),
            ("b_g", &mut self.b_g),
        ] {
            f(&join(prefix, name), t, true);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub hidden: usize,
    pub w_i: Value,
    pub w_f: Value,
    pub w_o: Value,
    pub w_g: Value,
    pub u_i: Value,
    pub u_f: Value,
    pub u_o: Value,
    pub u_g: Value,
    pub b_i: Value,
    pub b_f: Value,
    pub b_o: Value,
    pub b_g: Value,
}

/// Copy tensors out of a flat `name -> tensor` map back into a params struct.
pub fn load_named_tensors(target: &mut dyn HasParams, source: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut err = None;
    target.visit_mut("", &mut |name, t, _| {
        if err.is_some() {
            return;
        }
        match source.get(name) {
            Some(src) if src.shape() == t.shape() => *t = src.clone(),
            Some(src) => {
                err = Some(Error::ShapeMismatch {
                    op: "load_named_tensors",
                    lhs: t.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                })
            }
            None => err = Some(Error::MissingGradient(name.to_string())),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
