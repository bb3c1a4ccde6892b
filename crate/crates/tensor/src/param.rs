use std::collections::HashMap;

use crate::checkpoint::Checkpoint;
use crate::error::{Result, TensorError};
use crate::scalar::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients of every parameter placed on `tape` into the stored
    /// gradients. Parameters that were on the tape but unreachable from the
    /// loss receive zeros.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) {
        for (id, var) in tape.param_vars() {
            let p = &mut self.params[id.0];
            let g = tape
                .grad(var)
                .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
            match &mut p.grad {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(e, &v)| *e += v),
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn grad_norm(&self) -> T {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: T) -> T {
        let norm = self.grad_norm();
        if norm > max_norm && norm > T::zero() {
            let s = max_norm / norm;
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    /// Writes every parameter into `ckpt` under `prefix + name`.
    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        for p in &self.params {
            ckpt.insert_tensor(format!("{}{}", prefix, p.name), &p.value);
        }
    }

    /// Loads every registered parameter from `ckpt`; shapes must match.
    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        for p in &mut self.params {
            let key = format!("{}{}", prefix, p.name);
            let t: Tensor<T> = ckpt.tensor(&key)?;
            if t.shape() != p.value.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    key,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }
}
