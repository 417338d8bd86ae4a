use std::collections::HashMap;

use super::{Real, Rng, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Named, ordered collection of model parameters.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter. Panics on duplicate names, which are always a
    /// model construction bug.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        let id = ParamId(self.params.len());
        assert!(
            self.by_name.insert(name.clone(), id).is_none(),
            "duplicate parameter `{name}`"
        );
        self.params.push(Param {
            name,
            tensor: tensor.with_requires_grad(trainable),
        });
        id
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize], trainable: bool) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()), trainable)
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize], trainable: bool) -> ParamId {
        self.add(name, Tensor::ones(shape.to_vec()), trainable)
    }

    pub fn randn(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut Rng,
    ) -> ParamId {
        self.add(name, Tensor::randn(shape.to_vec(), std, rng), true)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.tensor.requires_grad)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let t = &mut self.params[id.0].tensor;
        t.requires_grad = trainable;
        if !trainable {
            t.grad = None;
        }
    }

    pub fn freeze_all(&mut self) {
        for id in self.ids().collect::<Vec<_>>() {
            self.set_trainable(id, false);
        }
    }

    /// Resets the gradient of every trainable parameter to zeros.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if p.tensor.requires_grad {
                let n = p.tensor.numel();
                match p.tensor.grad.as_mut() {
                    Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
                    None => p.tensor.grad = Some(vec![T::zero(); n]),
                }
            }
        }
    }

    /// Replaces the data of `id`, keeping shape and trainability.
    pub fn set_data(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let t = &mut self.params[id.0].tensor;
        if data.len() != t.numel() {
            return Err(Error::ShapeMismatch {
                op: "set_data",
                lhs: t.shape().to_vec(),
                rhs: vec![data.len()],
            });
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }

    /// Global L2 norm of all present gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.tensor.grad.as_ref())
            .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::lit(max_norm / norm);
            for p in &mut self.params {
                if let Some(g) = p.tensor.grad.as_mut() {
                    g.iter_mut().for_each(|v| *v = *v * s);
                }
            }
        }
        norm
    }

    /// Copies every parameter into another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Loads values by name from `(name, tensor)` pairs; every parameter must
    /// be present with a matching shape.
    pub fn load_named(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let map: HashMap<&str, &Tensor<T>> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &mut self.params {
            let src = map
                .get(p.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name)))?;
            if src.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    src.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), &p.tensor))
            .collect()
    }
}
