use crate::error::{dim_err, Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

static NEXT_STORE: AtomicUsize = AtomicUsize::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Which model copy a parameter belongs to when loading or assembling.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Owner {
    Shared,
    Language(String),
}

impl Owner {
    pub fn label(&self) -> &str {
        match self {
            Owner::Shared => "shared",
            Owner::Language(l) => l,
        }
    }
}

/// Role of a parameter inside its FFN slot; drives regime masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Base,
    Lora,
    LanguageFfn,
    Gate,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub owner: Owner,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Flat, named parameter storage. Layers refer to entries by [`ParamId`].
///
/// A parameter is trainable exactly when its tensor carries a gradient slot.
#[derive(Debug)]
pub struct ParamStore {
    uid: usize,
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            index: self.index.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, owner: Owner, kind: ParamKind, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            owner,
            kind,
            tensor,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| &self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over every parameter.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.tensor.requires_grad())
            .map(|p| p.tensor.len())
            .sum()
    }

    fn key(&self, id: ParamId) -> usize {
        (self.uid << 32) | id.0
    }

    /// Records the parameter on `g` (once per graph).
    pub fn bind(&self, g: &mut Graph, id: ParamId) -> Var {
        let t = &self.params[id.0].tensor;
        g.bind(self.key(id), t, t.requires_grad())
    }

    /// Routes later binds of `id` on `g` to `v`.
    pub fn preset(&self, g: &mut Graph, id: ParamId, v: Var) {
        g.preset(self.key(id), v);
    }

    /// Sums the gradients of every bound trainable parameter into its slot.
    pub fn accumulate(&mut self, g: &Graph, grads: &Gradients) -> Result<()> {
        let mine = self.uid;
        for (key, var) in g.bound() {
            if key >> 32 != mine {
                continue;
            }
            let p = &mut self.params[key & 0xffff_ffff];
            if let Some(gr) = grads.get(var) {
                p.tensor.accumulate_grad(gr)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.params[id.0].tensor.set_requires_grad(on);
    }

    /// Overwrites a parameter's values, keeping its shape and gradient flag.
    pub fn assign(&mut self, id: ParamId, src: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        let dst = &mut p.tensor;
        if dst.shape() != src.shape() {
            return dim_err(format!(
                "cannot assign {:?} into parameter {} of shape {:?}",
                src.shape(),
                p.name,
                dst.shape()
            ));
        }
        dst.data_mut().copy_from_slice(src.data());
        Ok(())
    }
}
