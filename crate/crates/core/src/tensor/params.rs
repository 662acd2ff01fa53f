use std::collections::BTreeMap;

use super::{Scalar, Tensor, TensorError};

/// Named parameter collection, ordered by name so iteration, serialization,
/// and checksums are deterministic. Every inserted tensor becomes a gradient
/// leaf.
pub struct ParamSet<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        assert!(!self.map.contains_key(&name), "duplicate parameter {}", name);
        tensor.set_requires_grad(true);
        self.map.insert(name, tensor);
    }

    /// Swaps in a new tensor for an existing name (vocabulary or position
    /// table growth).
    pub fn replace(&mut self, name: &str, tensor: Tensor<T>) -> Result<(), TensorError> {
        if !self.map.contains_key(name) {
            return Err(TensorError::UnknownParam(name.to_string()));
        }
        tensor.set_requires_grad(true);
        self.map.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, TensorError> {
        self.map
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Moves every entry of `other` in under `prefix.`.
    pub fn adopt(&mut self, prefix: &str, other: ParamSet<T>) {
        for (name, t) in other.map {
            self.insert(format!("{}.{}", prefix, name), t);
        }
    }

    /// New set over the same tensors: handles are shared, so updates through
    /// either set are visible in both.
    pub fn share(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            out.insert(name.clone(), t.clone());
        }
        out
    }

    /// Borrowing view of a namespace: entries under `prefix.` with the
    /// prefix stripped. The tensors are shared, not copied.
    pub fn namespace(&self, prefix: &str) -> ParamSet<T> {
        let lead = format!("{}.", prefix);
        let mut out = ParamSet::new();
        for (name, t) in &self.map {
            if let Some(rest) = name.strip_prefix(&lead) {
                out.map.insert(rest.to_string(), t.clone());
            }
        }
        out
    }

    pub fn deep_clone(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, t) in &self.map {
            out.map.insert(name.clone(), t.deep_clone());
        }
        out
    }

    /// Copies values from `other` into the existing tensors, keeping
    /// identities (and thus optimizer bindings) intact.
    pub fn copy_values_from(&mut self, other: &ParamSet<T>) -> Result<(), TensorError> {
        for (name, src) in other.iter() {
            let dst = self.get(name)?;
            if dst.shape() != src.shape() {
                return Err(TensorError::Shape {
                    op: "copy_values_from",
                    detail: format!("{}: {:?} vs {:?}", name, dst.shape(), src.shape()),
                });
            }
            dst.data_mut().copy_from_slice(&src.data());
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (name, t) in &self.map {
            out.map.insert(name.clone(), t.cast::<U>().with_grad());
        }
        out
    }

    pub fn zero_grads(&self) {
        for t in self.map.values() {
            t.zero_grad();
        }
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_get_and_unknown_name() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::zeros(vec![2, 2]));
        assert!(p.get("w").is_ok());
        assert!(p.get("w").unwrap().requires_grad());
        assert!(matches!(p.get("b"), Err(TensorError::UnknownParam(_))));
    }

    #[test]
    fn iteration_is_name_sorted() {
        let mut p = ParamSet::<f32>::new();
        p.insert("zeta", Tensor::zeros(vec![1]));
        p.insert("alpha", Tensor::zeros(vec![1]));
        p.insert("mid", Tensor::zeros(vec![1]));
        let names: Vec<&String> = p.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["alpha", "mid", "zeta"]);
    }

    #[test]
    fn adopt_prefixes_and_namespace_strips() {
        let mut head = ParamSet::<f32>::new();
        head.insert("w", Tensor::zeros(vec![2]));
        let mut all = ParamSet::<f32>::new();
        all.insert("encoder.w", Tensor::zeros(vec![3]));
        all.adopt("head", head);
        assert!(all.contains("head.w"));
        let view = all.namespace("head");
        assert_eq!(view.len(), 1);
        assert!(view.get("w").unwrap().ptr_eq(all.get("head.w").unwrap()));
    }

    #[test]
    fn deep_clone_is_independent_copy_values_rebinds() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::full(vec![2], 1.0));
        let snap = p.deep_clone();
        p.get("w").unwrap().data_mut()[0] = 5.0;
        assert_eq!(snap.get("w").unwrap().data()[0], 1.0);
        let before = p.get("w").unwrap().clone();
        p.copy_values_from(&snap).unwrap();
        assert!(before.ptr_eq(p.get("w").unwrap()));
        assert_eq!(p.get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn replace_requires_existing_name() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::zeros(vec![2]));
        assert!(p.replace("w", Tensor::zeros(vec![4])).is_ok());
        assert_eq!(p.get("w").unwrap().numel(), 4);
        assert!(p.replace("v", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn num_elements_counts_all() {
        let mut p = ParamSet::<f32>::new();
        p.insert("a", Tensor::zeros(vec![2, 3]));
        p.insert("b", Tensor::zeros(vec![5]));
        assert_eq!(p.num_elements(), 11);
    }
}
