use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;

use crate::error::{Error, Result};

use super::Tensor;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// First and second optimizer moments.
    pub m: Tensor,
    pub v: Tensor,
    /// Frozen entries (feature statistics and the like) never receive updates.
    pub trainable: bool,
}

impl Param {
    fn new(value: Tensor, trainable: bool) -> Self {
        let dim = value.dim();
        Param {
            value,
            grad: Array2::zeros(dim),
            m: Array2::zeros(dim),
            v: Array2::zeros(dim),
            trainable,
        }
    }
}

/// Named parameter tensors with matching gradient and moment buffers.
///
/// Iteration order is the lexicographic order of names, which makes every
/// reduction over a store deterministic.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    params: BTreeMap<String, Param>,
    /// Number of optimizer steps applied so far.
    pub step: u64,
}

impl Clone for ParamStore {
    /// Clones get a fresh identity so a tape never confuses the copy with the original.
    fn clone(&self) -> Self {
        ParamStore {
            uid: fresh_uid(),
            params: self.params.clone(),
            step: self.step,
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|((na, a), (nb, b))| na == nb && a.value == b.value)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: fresh_uid(),
            params: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value, true));
    }

    pub fn insert_frozen(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value, false));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn entry(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub(crate) fn entry_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    /// Zeroes the optimizer moments and step count, so that a new training
    /// phase does not inherit the momentum of the previous one.
    pub fn reset_optimizer_state(&mut self) {
        self.step = 0;
        for p in self.params.values_mut() {
            p.m.fill(0.0);
            p.v.fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
        if p.grad.dim() != g.dim() {
            return Err(Error::Contract(format!(
                "gradient shape {:?} does not match parameter `{name}` shape {:?}",
                g.dim(),
                p.grad.dim()
            )));
        }
        p.grad += g;
        Ok(())
    }

    /// L2 norm over the gradients of every parameter whose name starts with `prefix`.
    pub fn grad_norm(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Copies parameter values (not moments) from `other`, which must have identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            let src = other.get(name)?;
            if src.dim() != p.value.dim() {
                return Err(Error::Contract(format!("shape mismatch copying `{name}`")));
            }
            p.value.assign(src);
        }
        Ok(())
    }
}
