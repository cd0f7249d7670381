use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Gradients, Graph, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derives an independent stream seed from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(label.as_bytes());
    fnv1a(&bytes)
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    /// Uniform on `(-√(1/fan_in), √(1/fan_in))`. Each tensor draws from its
    /// own stream keyed by `(seed, name)`, so adding or removing other
    /// parameters never changes its values.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"));
    }

    /// Weights `[cout × cin]` and bias `[cout]` of a pointwise layer named `name`.
    pub fn insert_conv(&mut self, name: &str, cin: usize, cout: usize, seed: u64) {
        self.insert_uniform(&format!("{name}.w"), &[cout, cin], cin, seed);
        self.insert_uniform(&format!("{name}.b"), &[cout], cin, seed);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalar count of tensors whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Adds every tensor to `graph` as a parameter leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        let vars = self.tensors.iter().map(|t| graph.parameter(t.clone())).collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Adds every tensor as a constant leaf (inference, frozen networks).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Bound {
        let vars = self.tensors.iter().map(|t| graph.constant(t.clone())).collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Concatenates two sets, prefixing their names.
    pub fn merged(parts: &[(&str, &ParamSet)]) -> ParamSet {
        let mut out = ParamSet::new();
        for (prefix, set) in parts {
            for (name, t) in set.iter() {
                out.insert(format!("{prefix}{name}"), t.clone());
            }
        }
        out
    }

    /// Inverse of [`ParamSet::merged`] for one prefix.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }
}

/// Graph handles for a bound [`ParamSet`].
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Binds existing graph leaves to names.
    pub fn from_vars(names: &[String], vars: &[Var]) -> Bound {
        Bound {
            vars: vars[..names.len()].to_vec(),
            index: names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::MissingInput(format!("parameter `{name}`")))
    }

    /// Applies the pointwise layer registered by [`ParamSet::insert_conv`].
    pub fn conv(&self, graph: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{name}.w"))?;
        let b = self.var(&format!("{name}.b"))?;
        graph.pointwise_conv(x, w, b)
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient per parameter, zero where the parameter did not reach the loss.
    pub fn gradients(&self, params: &ParamSet, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(params.tensors())
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Adaptive-moment optimizer.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name_not_order() {
        let mut a = ParamSet::new();
        a.insert_uniform("x", &[3, 2], 2, 7);
        a.insert_uniform("y", &[4], 2, 7);
        let mut b = ParamSet::new();
        b.insert_uniform("y", &[4], 2, 7);
        assert_eq!(a.get("y"), b.get("y"));
        let bound = (0.5f64).sqrt();
        assert!(a.get("x").unwrap().data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn adam_with_zero_step_leaves_params_untouched() {
        let mut p = ParamSet::new();
        p.insert_uniform("w", &[5], 5, 1);
        let before = p.clone();
        let mut opt = Adam::new(0.0);
        opt.step(&mut p, &[Tensor::vector(&[1.0, -2.0, 3.0, 0.5, 0.0])]);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(&[3.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let w = p.get("w").unwrap().data()[0];
            opt.step(&mut p, &[Tensor::vector(&[2.0 * w])]);
        }
        assert!(p.get("w").unwrap().data()[0].abs() < 1e-2);
    }
}
