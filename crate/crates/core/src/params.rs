//! Named parameter sets, the graph↔parameter binding used during a
//! forward/backward pass, and the Adam optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};

/// Ordered, name-addressed collection of parameter tensors. Iteration
/// order is insertion order, so snapshots and checkpoints are stable.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        debug_assert!(!self.index.contains_key(name), "duplicate param {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor.requires_grad(true));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Write gradients from a backward pass into each tensor's grad slot;
    /// parameters absent from `grads` get a zero gradient.
    pub fn set_grads(&mut self, grads: &StepGrads) -> Result<()> {
        for (name, t) in self.iter_mut() {
            match grads.by_name.get(name) {
                Some(g) => t.set_grad(g.clone())?,
                None => t.set_grad(vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }
}

/// Gradients of one step keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct StepGrads {
    pub by_name: BTreeMap<String, Vec<f64>>,
}

/// Binds a [`ParamSet`] to a fresh [`Graph`] for one forward/backward
/// pass: parameters become leaves on first use and are memoized by name.
pub struct Session<'a> {
    pub graph: Graph,
    params: &'a ParamSet,
    bound: BTreeMap<String, NodeId>,
}

impl<'a> Session<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Session {
            graph: Graph::new(),
            params,
            bound: BTreeMap::new(),
        }
    }

    /// Leaf node for a named parameter.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        let id = self.graph.leaf(t);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Affine map of the last axis: x·W + b with parameters `{prefix}.w`
    /// and `{prefix}.b`.
    pub fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.graph.matmul(x, w)?;
        self.graph.add_bias(y, b)
    }

    /// Backward from a scalar loss; gradients keyed by parameter name.
    pub fn backward(&self, loss: NodeId) -> Result<StepGrads> {
        let grads = self.graph.backward(loss)?;
        let mut by_name = BTreeMap::new();
        for (name, &id) in &self.bound {
            if let Some(g) = grads.get(id) {
                by_name.insert(name.clone(), g.to_vec());
            }
        }
        Ok(StepGrads { by_name })
    }
}

/// Adaptive moment estimation with bias correction; no weight decay, no
/// learning-rate schedule.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update using the grad slots already populated on `params`.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, t) in params.iter_mut() {
            let grad = t
                .grad()
                .ok_or_else(|| Error::Contract(format!("missing gradient for {name}")))?
                .to_vec();
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let data = t.data_mut();
            for i in 0..grad.len() {
                m[i] = 0.9 * m[i] + 0.1 * grad[i];
                v[i] = 0.999 * v[i] + 0.001 * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_memoizes_params() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut s = Session::new(&p);
        let a = s.param("w").unwrap();
        let b = s.param("w").unwrap();
        assert_eq!(a, b);
        assert!(s.param("missing").is_err());
    }

    #[test]
    fn backward_collects_named_grads() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut s = Session::new(&p);
        let w = s.param("w").unwrap();
        let sq = s.graph.mul(w, w).unwrap();
        let loss = s.graph.sum_all(sq);
        let grads = s.backward(loss).unwrap();
        assert_eq!(grads.by_name["w"], vec![2.0, 4.0]);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::new(vec![1], vec![5.0]).unwrap());
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let mut s = Session::new(&p);
            let x = s.param("x").unwrap();
            let sq = s.graph.mul(x, x).unwrap();
            let loss = s.graph.sum_all(sq);
            let grads = s.backward(loss).unwrap();
            p.set_grads(&grads).unwrap();
            opt.step(&mut p).unwrap();
        }
        assert!(p.get("x").unwrap().data()[0].abs() < 1e-2);
    }
}
