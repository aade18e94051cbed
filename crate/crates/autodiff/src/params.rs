use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Error, Gradients, Result, Tensor};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Identifies one tensor inside one [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamRef {
    pub store: u64,
    pub index: usize,
}

/// Named, ordered collection of trainable tensors.
///
/// Every store gets a process-unique id so that several stores can feed the
/// same graph and still pick out only their own gradients. Cloning produces a
/// deep copy with a fresh id.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Registers a tensor (marked as requiring gradients) and returns its index.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor.requires_grad(true));
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param_ref(&self, index: usize) -> ParamRef {
        ParamRef {
            store: self.id,
            index,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Adds every gradient in `grads` that belongs to this store.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (r, g) in grads.params() {
            if r.store == self.id {
                self.tensors[r.index].accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so that their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let scale = max_norm / norm;
            for t in &mut self.tensors {
                if let Some(g) = t.grad_mut() {
                    g.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Overwrites the values of the named tensor; the shape must match.
    pub fn set_values(&mut self, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let t = &mut self.tensors[idx];
        if t.shape() != shape || t.numel() != values.len() {
            return Err(Error::BadTensor {
                shape: t.shape().to_vec(),
                expected: t.numel(),
                found: values.len(),
            });
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// Bitwise equality of all values, ignoring ids and gradients.
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
