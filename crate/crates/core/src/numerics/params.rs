use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    /// Frozen parameters enter the tape as constants and never receive gradients.
    pub frozen: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(
                "numerics",
                format!("duplicate parameter {name}"),
            ));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            frozen: false,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::invalid("numerics", format!("missing parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.iter_mut().for_each(|p| p.frozen = frozen);
    }

    pub fn all_frozen(&self) -> bool {
        self.params.iter().all(|p| p.frozen)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    frozen: p.frozen,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies every value of `other` into the same-named parameter here.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &other.params {
            let id = self.require(&p.name)?;
            let dst = &mut self.params[id.0].value;
            if dst.shape() != p.value.shape() {
                return Err(Error::shape(
                    "load_values",
                    format!("{}: {:?} vs {:?}", p.name, dst.shape(), p.value.shape()),
                ));
            }
            *dst = p.value.clone();
        }
        Ok(())
    }

    /// Parameters named `<prefix>.<rest>`, renamed to `<rest>`, flags kept.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        let dotted = format!("{prefix}.");
        let mut out = ParamStore::new();
        for p in &self.params {
            if let Some(rest) = p.name.strip_prefix(&dotted) {
                out.params.push(Param {
                    name: rest.to_string(),
                    value: p.value.clone(),
                    frozen: p.frozen,
                });
                out.index.insert(rest.to_string(), out.params.len() - 1);
            }
        }
        out
    }

    /// Inverse of [`subset`](Self::subset): copies values and frozen flags of
    /// `other` into `<prefix>.<name>`. Every `<prefix>.*` parameter must be covered.
    pub fn load_subset(&mut self, prefix: &str, other: &ParamStore<T>) -> Result<()> {
        let expected = self.subset(prefix).len();
        if other.len() != expected {
            return Err(Error::invalid(
                "numerics",
                format!(
                    "{prefix}: {} stored tensors, model has {expected}",
                    other.len()
                ),
            ));
        }
        for p in &other.params {
            let id = self.require(&format!("{prefix}.{}", p.name))?;
            let dst = &mut self.params[id.0];
            if dst.value.shape() != p.value.shape() {
                return Err(Error::shape(
                    "load_subset",
                    format!(
                        "{}: {:?} vs {:?}",
                        dst.name,
                        dst.value.shape(),
                        p.value.shape()
                    ),
                ));
            }
            dst.value = p.value.clone();
            dst.frozen = p.frozen;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
