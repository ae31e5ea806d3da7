use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;

use lap_tensor::{Gradients, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};

/// Named weights, ordered by name so that every traversal (init,
/// serialisation, optimiser updates) is deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value.detach());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| contract(format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Replaces an existing weight, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| contract(format!("no parameter named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(contract(format!(
                "{name}: shape {:?} does not match stored {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value.detach();
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        lap_tensor::save_checkpoint(path, self.params.iter().map(|(k, v)| (k.as_str(), v)))
            .map_err(|e| match e {
                lap_tensor::TensorError::Io(io) => Error::io(path, io),
                other => other.into(),
            })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let records = lap_tensor::load_checkpoint(path).map_err(|e| match e {
            lap_tensor::TensorError::Io(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        })?;
        let mut store = Self::new();
        for (name, t) in records {
            store.insert(name, t);
        }
        Ok(store)
    }

    /// Overwrites every weight of `self` from `other`, which must hold the
    /// same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(contract(format!(
                "checkpoint holds {} weights, model expects {}",
                other.params.len(),
                self.params.len()
            )));
        }
        for (name, value) in &other.params {
            self.set(name, value.clone())?;
        }
        Ok(())
    }

    /// Bit-exact equality of all weights whose group satisfies `pred`.
    pub fn bit_eq_where(&self, other: &ParamStore, pred: impl Fn(&str) -> bool) -> bool {
        self.params
            .iter()
            .filter(|(k, _)| pred(group_of(k)))
            .all(|(k, v)| other.params.get(k).is_some_and(|o| o.bit_eq(v)))
    }
}

/// Top-level group of a hierarchical weight name (`delta_a.stage3.conv.weight`
/// belongs to `delta_a`).
pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Uniform in `±sqrt(1 / fan_in)`, or zeros.
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, zero: bool) -> Result<Tensor> {
    let n = shape.iter().product();
    if zero {
        return Ok(Tensor::zeros(shape.to_vec())?);
    }
    let bound = (1.0 / fan_in as f64).sqrt();
    Ok(Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())?)
}

/// Resolves weight names to tensors for one forward pass. Weights in
/// trainable groups become leaves of the tape; all others enter as
/// constants, so no gradient work is recorded for frozen parts.
pub struct Binder<'a> {
    store: &'a ParamStore,
    tape: Option<&'a Tape>,
    trainable: &'a dyn Fn(&str) -> bool,
    leaves: RefCell<BTreeMap<String, Tensor>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, tape: Option<&'a Tape>, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self {
            store,
            tape,
            trainable,
            leaves: RefCell::new(BTreeMap::new()),
        }
    }

    /// A binder that records nothing.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, None, &|_| false)
    }

    /// Substitutes `value` (typically a tape leaf) for the stored weight
    /// `name` for the rest of this pass.
    pub fn bind(&self, name: &str, value: Tensor) -> Result<()> {
        let stored = self.store.get(name)?;
        if stored.shape() != value.shape() {
            return Err(contract(format!(
                "{name}: shape {:?} does not match stored {:?}",
                value.shape(),
                stored.shape()
            )));
        }
        self.leaves.borrow_mut().insert(name.to_string(), value);
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<Tensor> {
        if let Some(t) = self.leaves.borrow().get(name) {
            return Ok(t.clone());
        }
        let value = self.store.get(name)?;
        match self.tape {
            Some(tape) if (self.trainable)(group_of(name)) => {
                let leaf = tape.leaf(value);
                self.leaves.borrow_mut().insert(name.to_string(), leaf.clone());
                Ok(leaf)
            }
            _ => Ok(value.clone()),
        }
    }

    /// Gradients of every weight touched as a leaf during the pass.
    pub fn gradients(&self, grads: &Gradients) -> Result<BTreeMap<String, Tensor>> {
        self.leaves
            .borrow()
            .iter()
            .map(|(k, leaf)| Ok((k.clone(), grads.get(leaf)?)))
            .collect()
    }
}
