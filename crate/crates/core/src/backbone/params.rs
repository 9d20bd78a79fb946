use crate::error::{Error, Result};
use crate::numcore::{Graph, Rng, Tensor, Var};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.trainable());
        ParamId(self.tensors.len() - 1)
    }

    /// `N(0, 1/fan_in)` weights for a `[fan_in × fan_out]` matrix.
    pub fn add_linear(&mut self, name: &str, rng: &mut Rng, fan_in: usize, fan_out: usize) -> ParamId {
        let w = rng.normal_scaled(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        self.add(name, w)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Records every tensor as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| g.leaf(t)).collect(),
        }
    }

    /// Copies leaf gradients out of `g` into each tensor's gradient buffer.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &BoundParams) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(gr) = g.grad(v) {
                t.accumulate_grad(gr);
            }
        }
    }

    /// Replaces values by name; every stored tensor must be present with a matching shape.
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let mut staged = self.tensors.clone();
        for (i, name) in self.names.iter().enumerate() {
            let Some((_, t)) = entries.iter().find(|(n, _)| n == name) else {
                return Err(Error::Format(format!("checkpoint is missing tensor {name}")));
            };
            if t.shape() != staged[i].shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    staged[i].shape()
                )));
            }
            staged[i] = t.clone().trainable();
        }
        if entries.len() != self.names.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model has {}",
                entries.len(),
                self.names.len()
            )));
        }
        self.tensors = staged;
        Ok(())
    }
}

/// Graph leaves for a [`ParamStore`], valid for one graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Wraps externally recorded leaves, one per stored tensor in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
