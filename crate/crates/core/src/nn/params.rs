use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether the optimizer updates an entry. Buffers hold batch-norm running
/// statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    kind: ParamKind,
    value: Rc<Tensor>,
}

/// Named parameter arrays, addressed by hierarchical dotted names such as
/// `backbone.enc.1.conv2.weight`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// # Panics
    /// On a duplicate name; names are the checkpoint compatibility contract.
    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            kind,
            value: Rc::new(value),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids()
            .filter(|&id| self.kind(id) == ParamKind::Trainable)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Rc<Tensor> {
        Rc::clone(&self.entries[id.0].value)
    }

    /// Mutable access; copies only if a graph still holds the value.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Replace every value with the one of the same name in `other`.
    /// Names and shapes must agree exactly.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), String> {
        if self.len() != other.len() {
            return Err(format!(
                "parameter count mismatch: expected {}, found {}",
                self.len(),
                other.len()
            ));
        }
        for id in self.ids().collect::<Vec<_>>() {
            let name = self.name(id).to_string();
            let src = other
                .lookup(&name)
                .ok_or_else(|| format!("missing parameter {name}"))?;
            if other.get(src).shape() != self.get(id).shape() {
                return Err(format!(
                    "shape mismatch for {name}: expected {:?}, found {:?}",
                    self.get(id).shape(),
                    other.get(src).shape()
                ));
            }
            self.entries[id.0].value = other.shared(src);
        }
        Ok(())
    }
}

/// He-normal initialisation: truncated normal (±2σ) with
/// σ = sqrt(2 / fan_in), rescaled so the truncated distribution keeps that
/// variance.
pub fn he_normal<R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor {
    // Standard deviation of a unit normal truncated to [-2, 2].
    const TRUNC_STD: f64 = 0.879_625_661_034_239_8;
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f64;
    let std = (2.0 / fan_in).sqrt() / TRUNC_STD;
    let len = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    while data.len() < len {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push((z * std) as f32);
        }
    }
    Tensor::from_vec(shape, data)
}
