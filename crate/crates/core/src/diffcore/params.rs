use std::sync::atomic::{AtomicU64, Ordering};

use crate::diffcore::graph::Gradients;
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_SET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Non-trainable entries hold layer state such as batchnorm running
    /// statistics; they are serialized but never touched by the optimizer.
    pub trainable: bool,
    pub grad: Option<Tensor>,
}

/// Named parameter tensors of one network.
///
/// Graph leaves created from a set remember the set's identity, so the
/// gradients produced by a backward pass can be routed back here.
#[derive(Debug)]
pub struct ParameterSet {
    id: u64,
    params: Vec<Param>,
}

impl Clone for ParameterSet {
    fn clone(&self) -> Self {
        // A clone is an independent snapshot: it must not receive gradients
        // computed against the original.
        Self {
            id: fresh_id(),
            params: self.params.clone(),
        }
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            params: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
            grad: None,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Copies the gradients of this set's parameters out of `grads`.
    ///
    /// Trainable parameters the loss did not reach receive zero gradients.
    pub fn absorb(&mut self, grads: &Gradients) -> Result<()> {
        let id = self.id;
        for (index, p) in self.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let g = match grads.for_param(id, index) {
                Some(g) => {
                    if g.shape() != p.value.shape() {
                        return Err(Error::Gradient(format!(
                            "gradient for {} has shape {:?}, parameter has {:?}",
                            p.name,
                            g.shape(),
                            p.value.shape()
                        )));
                    }
                    g.clone()
                }
                None => Tensor::zeros(p.value.shape()),
            };
            p.grad = Some(g);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Replaces parameter values with those of `other` (same layout).
    pub fn copy_values_from(&mut self, other: &ParameterSet) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Shape("parameter set layouts differ".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} does not match {}",
                    dst.name, src.name
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
