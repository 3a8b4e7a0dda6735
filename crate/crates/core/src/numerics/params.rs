use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group a parameter belongs to; groups get separate learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    pub group: ParamGroup,
    /// Excluded from weight decay (biases, norm affines, embeddings, gates).
    pub no_decay: bool,
}

/// Named parameter table in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<f32>,
        group: ParamGroup,
    ) -> ParamId {
        self.add_inner(name.into(), value, group, false)
    }

    pub fn add_no_decay(
        &mut self,
        name: impl Into<String>,
        value: Tensor<f32>,
        group: ParamGroup,
    ) -> ParamId {
        self.add_inner(name.into(), value, group, true)
    }

    fn add_inner(
        &mut self,
        name: String,
        value: Tensor<f32>,
        group: ParamGroup,
        no_decay: bool,
    ) -> ParamId {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            group,
            no_decay,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<f32> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Copy of the parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            out.add_inner(p.name.clone(), p.value.clone(), p.group, p.no_decay);
        }
        out
    }

    /// Overwrite values from `other` for every name both stores share.
    pub fn copy_from(&mut self, other: &ParamStore) {
        for p in &other.params {
            if let Some(id) = self.id(&p.name) {
                self.params[id.0].value = p.value.clone();
            }
        }
    }

    /// Replace values by name. Every stored name must be present and no extra
    /// names may appear.
    pub fn load_named(&mut self, named: Vec<(String, Tensor<f32>)>) -> Result<()> {
        let mut unknown = Vec::new();
        let mut seen = vec![false; self.params.len()];
        let mut staged = Vec::new();
        for (name, value) in named {
            match self.id(&name) {
                Some(id) => {
                    if self.params[id.0].value.shape() != value.shape() {
                        return Err(Error::dim(
                            "load_named",
                            self.params[id.0].value.shape(),
                            value.shape(),
                        ));
                    }
                    seen[id.0] = true;
                    staged.push((id, value));
                }
                None => unknown.push(name),
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Checkpoint(format!(
                "unknown tensor names: {}",
                unknown.join(", ")
            )));
        }
        let missing: Vec<&str> = self
            .params
            .iter()
            .zip(&seen)
            .filter(|(_, s)| !**s)
            .map(|(p, _)| p.name.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "missing tensor names: {}",
                missing.join(", ")
            )));
        }
        for (id, value) in staged {
            self.params[id.0].value = value;
        }
        Ok(())
    }
}

/// Truncated normal at two standard deviations, resampled on rejection.
pub fn trunc_normal<R: Rng + ?Sized>(
    shape: impl Into<Vec<usize>>,
    std: f64,
    rng: &mut R,
) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break (z * std) as f32;
        }
    })
}
