//! Named parameter registry shared by the model, optimizer, and checkpoints.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered, named collection of learnable tensors. Order is construction
/// order and is stable, so optimizer state and checkpoints can address
/// parameters positionally as well as by name.
#[derive(Debug, Clone)]
pub struct ParamSet<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id.0);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<(ParamId, &Tensor<S>)> {
        self.index
            .get(name)
            .map(|&i| (ParamId(i), &self.tensors[i]))
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<S>) -> Result<()> {
        if tensor.shape() != self.tensors[id.0].shape() {
            return Err(CoreError::contract(format!(
                "parameter `{}` shape {:?} cannot be replaced by {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                tensor.shape()
            )));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

/// All parameters of a [`ParamSet`] bound into one graph as gradient-tracked
/// leaves. Binding everything up front guarantees that unused parameters
/// still report zero gradients.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn bind<S: Scalar>(graph: &mut Graph<S>, params: &ParamSet<S>) -> Result<Self> {
        let vars = params
            .tensors()
            .iter()
            .map(|t| graph.input(t.clone(), true))
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }

    /// Wrap an existing list of graph vars in registry order (used by the
    /// finite-difference harness, which owns the graph inputs).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundParams { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every parameter, in registry order.
    pub fn gradients<S: Scalar>(
        &self,
        grads: &crate::numerics::Gradients<S>,
    ) -> Vec<Tensor<S>> {
        self.vars.iter().map(|&v| grads.grad(v)).collect()
    }
}
