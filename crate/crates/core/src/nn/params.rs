use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to one storage cell in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named storage cell. Several names may alias one cell (weight tying).
#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
    pub trainable: bool,
}

/// Owns every parameter of a model. Names are unique; aliases resolve to the
/// same cell so reads and writes through either name observe the same data.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    cells: Vec<Parameter<S>>,
    names: BTreeMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            cells: Vec::new(),
            names: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId> {
        if self.names.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.cells.len());
        self.cells.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            trainable: true,
        });
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    /// Register `alias` as another name for an existing cell.
    pub fn alias(&mut self, alias: &str, target: ParamId) -> Result<()> {
        if self.names.contains_key(alias) {
            return Err(Error::Config(format!("duplicate parameter name `{alias}`")));
        }
        self.names.insert(alias.to_string(), target);
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.cells[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.cells[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.cells[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.cells[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.cells.len()).map(ParamId)
    }

    pub fn cells(&self) -> &[Parameter<S>] {
        &self.cells
    }

    /// Every registered name with the cell it resolves to, sorted by name.
    pub fn names(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.names.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Groups of names that share a cell, for cells with more than one name.
    pub fn tying_groups(&self) -> Vec<Vec<String>> {
        let mut groups: BTreeMap<ParamId, Vec<String>> = BTreeMap::new();
        for (name, id) in &self.names {
            groups.entry(*id).or_default().push(name.clone());
        }
        groups.into_values().filter(|g| g.len() > 1).collect()
    }

    /// Total number of scalar parameters, counting each cell once.
    pub fn num_scalars(&self) -> usize {
        self.cells.iter().map(|c| c.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for cell in &mut self.cells {
            cell.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[S]) {
        let cell = &mut self.cells[id.0];
        match &mut cell.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad) {
                    *a = *a + *b;
                }
            }
            None => {
                cell.grad = Some(
                    Tensor::new(cell.value.shape(), grad.to_vec()).expect("gradient shape"),
                );
            }
        }
    }

    /// Global L2 norm of all present gradients.
    pub fn grad_norm(&self) -> f64 {
        self.cells
            .iter()
            .filter_map(|c| c.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: S) {
        for cell in &mut self.cells {
            if let Some(g) = &mut cell.grad {
                for v in g.data_mut() {
                    *v = *v * factor;
                }
            }
        }
    }

    /// Copy into another precision, keeping names and aliases.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            cells: self
                .cells
                .iter()
                .map(|c| Parameter {
                    name: c.name.clone(),
                    value: c.value.cast(),
                    grad: None,
                    trainable: c.trainable,
                })
                .collect(),
            names: self.names.clone(),
        }
    }
}
