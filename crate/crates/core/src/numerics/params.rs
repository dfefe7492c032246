use indexmap::IndexMap;

use super::{Graph, NumericsError, Scalar, Tensor, Var};

/// Named learnable tensors in a fixed registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

/// Graph handles for every tensor of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var, NumericsError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<(), NumericsError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
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

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Registers every tensor on `g`, as trainable leaves or as constants.
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.param(name, t)
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }

    /// Registers trainable leaves named `prefix + name` while keeping the
    /// plain names as lookup keys, so a second copy of the same set can live
    /// on one graph.
    pub fn register_prefixed(&self, g: &mut Graph<T>, prefix: &str) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), g.param(&format!("{prefix}{name}"), t)))
            .collect();
        ParamVars { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}
