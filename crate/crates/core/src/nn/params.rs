use std::collections::HashMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::{Scalar, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensor with a trainable flag.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    name: String,
    value: Arc<Tensor<T>>,
    trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn value_arc(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

/// Registry of every parameter of a model, addressed by id or dotted name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a new trainable parameter. Panics on a duplicate name, which
    /// is always a model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value: Arc::new(value),
            trainable: true,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
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

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        let p = &mut self.params[id.0];
        assert_eq!(p.value.shape(), value.shape(), "shape change for {}", p.name);
        p.value = Arc::new(value);
    }

    /// In-place update through a closure.
    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut Tensor<T>)) {
        let p = &mut self.params[id.0];
        f(Arc::make_mut(&mut p.value));
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Sets the trainable flag of every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(i, _)| i).collect()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| !p.trainable).map(|(i, _)| i).collect()
    }

    /// Scalar count over the given parameters.
    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&i| self.get(i).value.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values of the given
    /// parameters, in id order.
    pub fn digest(&self, ids: &[ParamId]) -> String {
        let mut ids = ids.to_vec();
        ids.sort();
        let mut h = Sha256::new();
        for id in ids {
            let p = self.get(id);
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies values for every name present in both stores with equal shape.
    /// Returns the names that were copied.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> Vec<String> {
        let mut copied = Vec::new();
        for p in &mut self.params {
            if let Some(&oid) = other.by_name.get(&p.name) {
                let o = other.get(oid);
                if o.value.shape() == p.value.shape() {
                    p.value = o.value_arc();
                    copied.push(p.name.clone());
                }
            }
        }
        copied
    }

    /// Same parameters in another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
