use std::collections::HashMap;

use crate::error::NumericsError;
use crate::numerics::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor owned by a model. `trainable` alone decides whether the
/// optimizer may touch it.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Name-addressed parameter arena. Removed parameters leave a hole so that
/// outstanding ids stay valid.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    slots: Vec<Option<Parameter<T>>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { slots: Vec::new(), index: HashMap::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<T>,
        trainable: bool,
    ) -> Result<ParamId, NumericsError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::Input(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.slots.len());
        self.index.insert(name.clone(), id);
        self.slots.push(Some(Parameter { name, tensor, trainable }));
        Ok(id)
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Parameter<T>> {
        let p = self.slots.get_mut(id.0)?.take()?;
        self.index.remove(&p.name);
        Some(p)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        self.slots[id.0].as_ref().expect("parameter was removed")
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        self.slots[id.0].as_mut().expect("parameter was removed")
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.get(id).tensor
    }

    /// Live parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.slots.iter().enumerate().filter_map(|(i, p)| p.as_ref().map(|p| (ParamId(i), p)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.slots
            .iter_mut()
            .enumerate()
            .filter_map(|(i, p)| p.as_mut().map(|p| (ParamId(i), p)))
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn set_trainable_where(&mut self, mut pred: impl FnMut(&str) -> bool) {
        for (_, p) in self.iter_mut() {
            p.trainable = pred(&p.name);
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.name.clone()).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.tensor.numel()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.iter().map(|(_, p)| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.iter_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Global L2 norm of all gradient buffers on trainable parameters.
    pub fn grad_norm(&self) -> f64 {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .filter_map(|(_, p)| p.tensor.grad())
            .flat_map(|g| g.iter().map(|x| x.as_f64().powi(2)))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        let f = T::of(factor);
        for (_, p) in self.iter_mut() {
            if let Some(g) = p.tensor.grad() {
                let scaled: Vec<T> = g.iter().map(|&x| x * f).collect();
                p.tensor.zero_grad();
                p.tensor.accumulate_grad(&scaled);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            slots: self
                .slots
                .iter()
                .map(|s| {
                    s.as_ref().map(|p| Parameter {
                        name: p.name.clone(),
                        tensor: p.tensor.cast(),
                        trainable: p.trainable,
                    })
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
