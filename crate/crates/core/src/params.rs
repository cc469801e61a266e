//! Named parameter storage shared by every model component.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{DType, Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    /// `tensor.requires_grad` doubles as the trainable flag.
    pub tensor: Tensor,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor: tensor.with_requires_grad(trainable),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.tensor.requires_grad = trainable;
        }
    }

    pub fn set_dtype(&mut self, dtype: DType) {
        for p in &mut self.params {
            p.tensor.set_dtype(dtype);
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|id| self.params[id.0].trainable()).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// SHA-256 over name, shape and payload bits of every tensor whose name
    /// starts with `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for &e in p.tensor.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for x in p.tensor.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Records every parameter as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(&p.tensor))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// Like [`bind`](Self::bind) but substitutes `trainable_vars` (in
    /// [`trainable_ids`](Self::trainable_ids) order) for the trainable tensors.
    pub fn bind_with(&self, tape: &mut Tape, trainable_vars: &[Var]) -> Result<Bound> {
        let mut supplied = trainable_vars.iter();
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable() {
                    supplied
                        .next()
                        .copied()
                        .ok_or_else(|| Error::MissingParam(p.name.clone()))
                } else {
                    tape.leaf(&p.tensor)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// Copies tape gradients into each trainable tensor's grad slot.
    pub fn store_grads(&mut self, bound: &Bound, grads: &mut Gradients) {
        for (p, var) in self.params.iter_mut().zip(&bound.vars) {
            if p.trainable() {
                let g = grads.take(*var).unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
                p.tensor.grad = Some(g);
            } else {
                p.tensor.grad = None;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn checksum_tracks_prefix_only() {
        let mut s = ParamStore::new();
        s.insert("base.w", Tensor::zeros(&[2]), false).unwrap();
        let other = s.insert("shadow.w", Tensor::zeros(&[2]), true).unwrap();
        let before = s.checksum("base.");
        s.get_mut(other).data_mut()[0] = 1.0;
        assert_eq!(before, s.checksum("base."));
        let id = s.id("base.w").unwrap();
        s.get_mut(id).data_mut()[1] = -0.0;
        assert_ne!(before, s.checksum("base."));
    }
}
