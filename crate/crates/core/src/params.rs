//! Named parameter collections.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Ordered map from parameter name to tensor. Tensors are shared with any
/// graph they are bound to and copied on write.
#[derive(Clone, Default)]
pub struct ParamSet<T> {
    entries: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Real> std::fmt::Debug for ParamSet<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.entries.iter().map(|(k, v)| (k, v.shape())))
            .finish()
    }
}

impl<T: Real> PartialEq for ParamSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape() && bits_equal(va, vb))
    }
}

fn bits_equal<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    let (mut ba, mut bb) = (Vec::new(), Vec::new());
    a.data().iter().for_each(|v| v.write_le(&mut ba));
    b.data().iter().for_each(|v| v.write_le(&mut bb));
    ba == bb
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    /// Insert a new entry; each name may appear only once.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::KeyMismatch(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, Arc::new(tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(Arc::as_ref)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(Arc::make_mut)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::KeyMismatch(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor<T>>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Entries whose name starts with any of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
                .map(|(k, v)| (k.clone(), Arc::clone(v)))
                .collect(),
        }
    }

    /// Deep copy that shares no storage with `self`.
    pub fn deep_clone(&self) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(Tensor::clone(v))))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast::<U>())))
                .collect(),
        }
    }

    /// True when both sets name the same tensor storage for `name`.
    pub fn shares_storage(&self, other: &ParamSet<T>, name: &str) -> bool {
        match (self.entries.get(name), other.entries.get(name)) {
            (Some(a), Some(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl<T: Real> FromIterator<(String, Tensor<T>)> for ParamSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        ParamSet {
            entries: iter.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        }
    }
}
