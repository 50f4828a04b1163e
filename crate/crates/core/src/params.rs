//! Named parameter storage and binding of parameters onto a tape.

use std::collections::HashMap;
use std::path::Path;

use cdst_tensor::{checkpoint, Gradients, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{CdstError, Result};

/// Ordered collection of named tensors. Insertion order is the
/// serialization order, so identical construction gives identical files.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| CdstError::MissingWeight(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(CdstError::MissingWeight(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Names satisfying `pred`, in store order.
    pub fn select(&self, pred: impl Fn(&str) -> bool) -> Vec<String> {
        self.names().filter(|n| pred(n)).map(str::to_string).collect()
    }

    /// Mutable references to several distinct entries, in the order given.
    pub fn get_many_mut(&mut self, names: &[String]) -> Result<Vec<&mut Tensor>> {
        let mut slots: Vec<Option<&mut Tensor>> = self.entries.iter_mut().map(|(_, t)| Some(t)).collect();
        names
            .iter()
            .map(|n| {
                let i = *self.index.get(n).ok_or_else(|| CdstError::MissingWeight(n.clone()))?;
                slots[i]
                    .take()
                    .ok_or_else(|| CdstError::InvalidParameter(format!("{n} requested twice")))
            })
            .collect()
    }

    /// Moves every entry of `other` into `self`, replacing equal names.
    pub fn extend(&mut self, other: ParamStore) {
        for (n, t) in other.entries {
            self.insert(n, t);
        }
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, self.iter())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut s = Self::new();
        for (n, t) in checkpoint::load(path)? {
            s.insert(n, t);
        }
        Ok(s)
    }

    /// Gaussian-initialized matrix `[rows, cols]` with std `1/sqrt(rows)`.
    pub fn init_linear(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
        self.insert(name, Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng));
    }

    /// 3x3 convolution kernel and zero bias under `name.w` / `name.b`.
    pub fn init_conv(&mut self, name: &str, ci: usize, co: usize, rng: &mut impl Rng) {
        self.insert(format!("{name}.w"), Tensor::randn(&[3, 3, ci, co], 1.0 / ((9 * ci) as f64).sqrt(), rng));
        self.insert(format!("{name}.b"), Tensor::zeros(&[co]));
    }

    /// Unit gain and zero shift under `name.g` / `name.b`.
    pub fn init_norm(&mut self, name: &str, c: usize) {
        self.insert(format!("{name}.g"), Tensor::full(&[c], 1.0));
        self.insert(format!("{name}.b"), Tensor::zeros(&[c]));
    }
}

/// Lazily places store entries on a tape as borrowed leaves.
///
/// Entries for which `trainable` holds require grad; each name is bound at
/// most once per tape.
pub struct Binder<'s> {
    store: &'s ParamStore,
    trainable: &'s dyn Fn(&str) -> bool,
    bound: HashMap<&'s str, Var>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, trainable: &'s dyn Fn(&str) -> bool) -> Self {
        Self {
            store,
            trainable,
            bound: HashMap::new(),
        }
    }

    /// Binder with every entry frozen.
    pub fn frozen(store: &'s ParamStore) -> Self {
        Self::new(store, &|_| false)
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape<'s>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let store = self.store;
        let (key, &i) = store
            .index
            .get_key_value(name)
            .ok_or_else(|| CdstError::MissingWeight(name.to_string()))?;
        let v = tape.leaf(&store.entries[i].1, (self.trainable)(name));
        self.bound.insert(key.as_str(), v);
        Ok(v)
    }

    /// `(name, gradient)` for every bound trainable entry that received one.
    pub fn gradients<'g>(&self, grads: &'g Gradients) -> Vec<(&'s str, &'g [f64])> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter(|(n, _)| (self.trainable)(n))
            .filter_map(|(&n, &v)| grads.get(v).map(|g| (n, g)))
            .collect();
        out.sort_by_key(|(n, _)| *n);
        out
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &&'s str> {
        self.bound.keys()
    }
}
