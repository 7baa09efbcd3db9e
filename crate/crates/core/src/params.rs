use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Named tensors keyed by dot-separated path, iterated lexicographically.
///
/// Trainable parameters have `requires_grad` set. Buffers such as batch-norm
/// running statistics live here too, with the flag cleared.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    /// Adds a tensor; a path may only be registered once.
    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let path = path.into();
        if path.is_empty() || path.split('.').any(str::is_empty) {
            return Err(Error::invalid("param store", format!("malformed path `{path}`")));
        }
        if self.map.contains_key(&path) {
            return Err(Error::invalid("param store", format!("duplicate path `{path}`")));
        }
        self.map.insert(path, t);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.map.get(path).ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.map.get_mut(path).ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(_, t)| t.requires_grad())
    }

    /// Element count of trainable tensors.
    pub fn num_params(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    /// Element count of everything, buffers included.
    pub fn num_elements(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.map.values_mut().for_each(Tensor::zero_grad);
    }

    /// Reads one element, as used by finite differencing.
    pub fn element(&self, path: &str, index: usize) -> Result<T> {
        let t = self.get(path)?;
        t.data().get(index).copied().ok_or_else(|| Error::ParamIndex {
            path: path.to_string(),
            index,
            len: t.numel(),
        })
    }

    pub fn set_element(&mut self, path: &str, index: usize, v: T) -> Result<()> {
        let t = self.get_mut(path)?;
        let len = t.numel();
        let slot = t.data_mut().get_mut(index).ok_or_else(|| Error::ParamIndex {
            path: path.to_string(),
            index,
            len,
        })?;
        *slot = v;
        Ok(())
    }

    /// Converts every tensor to another precision, keeping flags.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_and_missing_paths() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a.w", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a.w", Tensor::zeros(&[2])).is_err());
        assert!(s.insert("a..w", Tensor::zeros(&[2])).is_err());
        assert!(matches!(s.get("b"), Err(Error::MissingParam(_))));
        assert!(matches!(s.element("a.w", 2), Err(Error::ParamIndex { .. })));
    }

    #[test]
    fn iteration_is_lexicographic() {
        let mut s = ParamStore::<f32>::new();
        for p in ["z", "a.b", "a", "m.q"] {
            s.insert(p, Tensor::zeros(&[1])).unwrap();
        }
        let keys: Vec<_> = s.iter().map(|(k, _)| k).collect();
        assert_eq!(keys, ["a", "a.b", "m.q", "z"]);
    }

    #[test]
    fn buffers_are_not_counted_as_params() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(&[3]).with_requires_grad(true)).unwrap();
        s.insert("running_mean", Tensor::zeros(&[5])).unwrap();
        assert_eq!(s.num_params(), 3);
        assert_eq!(s.num_elements(), 8);
    }
}
