use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use super::{Tensor, TensorError};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LrGroup {
    /// Classification head, or everything in from-scratch mode.
    Head,
    /// Backbone blocks released by the unfreezing schedule.
    Unfrozen,
}

#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub trainable: bool,
    pub group: LrGroup,
}

/// Named trainable state of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParameterRegistry<S> {
    params: Vec<Parameter<S>>,
    by_name: BTreeMap<String, usize>,
}

impl<S: Scalar> ParameterRegistry<S> {
    pub fn new() -> Self {
        ParameterRegistry {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId, TensorError> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.into()));
        }
        let id = self.params.len();
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            trainable: true,
            group: LrGroup::Head,
        });
        self.by_name.insert(name.into(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<S>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Total scalar count over all parameters.
    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar count over trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Scalar count over parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool, group: LrGroup) {
        for p in &mut self.params {
            p.trainable = trainable;
            p.group = group;
        }
    }

    /// Marks every parameter under `prefix`; returns how many scalars changed
    /// from frozen to trainable.
    pub fn unfreeze_prefix(&mut self, prefix: &str, group: LrGroup) -> usize {
        let mut released = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            if !p.trainable {
                p.trainable = true;
                p.group = group;
                released += p.value.len();
            }
        }
        released
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = false;
        }
    }

    /// Copies values from `other` for every parameter with the same name and
    /// shape; returns the names that were not found or did not match.
    pub fn load_values<T: Scalar>(&mut self, other: &ParameterRegistry<T>) -> Vec<String> {
        let mut missing = Vec::new();
        for p in &mut self.params {
            match other.id(&p.name).map(|id| other.get(id)) {
                Some(src) if src.value.shape() == p.value.shape() => {
                    p.value = src.value.cast();
                }
                _ => missing.push(p.name.clone()),
            }
        }
        missing
    }

    /// Same parameters in another precision, gradients reset.
    pub fn cast<T: Scalar>(&self) -> ParameterRegistry<T> {
        ParameterRegistry {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape()),
                    trainable: p.trainable,
                    group: p.group,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
