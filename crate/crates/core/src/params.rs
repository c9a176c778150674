//! Named parameter storage shared by the recognizer and the language model,
//! plus the SGD update with global-norm clipping.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Ordered collection of named tensors. Order is fixed at construction and
/// is what [`ParamStore::bind`] follows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a graph leaf, trainable or frozen.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param_ref(t) } else { g.constant_ref(t) })
            .collect()
    }

    /// Gradients for bound ids, zero where a parameter was unreachable.
    pub fn collect_grads(&self, grads: &mut Gradients, ids: &[NodeId]) -> Vec<Tensor> {
        ids.iter()
            .zip(&self.tensors)
            .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros_like(t)))
            .collect()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_named(&self) -> BTreeMap<String, NamedTensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                (n.clone(), NamedTensor { shape: t.shape().to_vec(), values: t.data().to_vec() })
            })
            .collect()
    }

    /// Overwrites every tensor from a serialized map, checking that each
    /// name is present with exactly the expected shape.
    pub fn load_named(&mut self, named: &BTreeMap<String, NamedTensor>) -> Result<()> {
        if named.len() != self.names.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                self.names.len()
            )));
        }
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = named
                .get(n)
                .ok_or_else(|| Error::Data(format!("checkpoint missing tensor {n}")))?;
            if src.shape != t.shape() {
                return Err(Error::Shape(format!(
                    "tensor {n}: checkpoint shape {:?}, config expects {:?}",
                    src.shape,
                    t.shape()
                )));
            }
            *t = Tensor::new(src.shape.clone(), src.values.clone())?;
        }
        Ok(())
    }
}

/// Serialized tensor: shape plus row-major values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Elementwise sum of per-example gradient lists, in order.
pub fn sum_grads(acc: &mut Option<Vec<Tensor>>, grads: Vec<Tensor>) {
    match acc {
        None => *acc = Some(grads),
        Some(a) => {
            for (x, g) in a.iter_mut().zip(&grads) {
                x.add_assign(g.data());
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Builds one graph per item (in parallel), back-propagates each scalar
/// loss and sums the parameter gradients in item order, so the result does
/// not depend on thread scheduling. `f` receives the bound parameter ids.
///
/// A non-finite loss aborts with [`Error::Numeric`] naming the item index.
pub fn parallel_grads<'m, T, R, F>(store: &'m ParamStore, items: &[T], f: F) -> Result<(Vec<Tensor>, Vec<R>)>
where
    T: Sync,
    R: Send,
    F: Fn(&mut Graph<'m>, &[NodeId], &T) -> Result<(NodeId, R)> + Sync,
{
    let per_item = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let mut g = Graph::new();
            let ids = store.bind(&mut g, true);
            let (loss, extra) = f(&mut g, &ids, item)?;
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {v} on batch item {i}")));
            }
            let mut grads = g.backward(loss)?;
            Ok((store.collect_grads(&mut grads, &ids), extra))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = None;
    let mut extras = Vec::with_capacity(per_item.len());
    for (grads, extra) in per_item {
        sum_grads(&mut acc, grads);
        extras.push(extra);
    }
    let acc = acc.unwrap_or_else(|| store.tensors().iter().map(Tensor::zeros_like).collect());
    Ok((acc, extras))
}

/// Plain SGD with global gradient-norm clipping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub clip_norm: f64,
}

impl Sgd {
    /// Applies `params -= lr * scale * grads`, first rescaling so the
    /// global norm of `scale * grads` is at most `clip_norm`. Returns the
    /// pre-clip norm.
    pub fn step(&self, params: &mut ParamStore, grads: &[Tensor], scale: f64) -> Result<f64> {
        let norm = global_norm(grads) * scale;
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let clip = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        let k = self.lr * scale * clip;
        for (p, g) in params.tensors_mut().iter_mut().zip(grads) {
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= k * d;
            }
        }
        Ok(norm)
    }
}
