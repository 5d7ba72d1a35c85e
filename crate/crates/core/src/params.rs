//! Named, shaped, trainable parameter arrays with gradient slots and freeze flags.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, TensorId};

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub frozen: bool,
}

/// Ordered collection of model parameters. Iteration follows registration
/// order, which fixes checkpoint layout and keeps runs reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        let numel: usize = shape.iter().product();
        if numel == 0 || data.len() != numel {
            return Err(Error::Dim(format!(
                "parameter `{name}`: data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            grad: vec![0.0; numel],
            shape,
            data,
            frozen: false,
        });
        Ok(())
    }

    pub fn register_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut R,
    ) -> Result<()> {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
        self.register(name, shape, data)
    }

    pub fn register_const(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<()> {
        let numel: usize = shape.iter().product();
        self.register(name, shape, vec![value; numel])
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|i| &self.params[*i])
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        match self.index.get(name) {
            Some(i) => Ok(&mut self.params[*i]),
            None => Err(Error::Config(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }


    pub(crate) fn grad_mut(&mut self, i: usize) -> &mut Vec<f64> {
        &mut self.params[i].grad
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Freeze every parameter whose name starts with `prefix`. Frozen
    /// parameters enter tapes as constants and are skipped by the optimizer.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut() {
            if p.name.starts_with(prefix) {
                p.frozen = true;
                n += 1;
            }
        }
        n
    }

    /// Copy values from `other` into same-named parameters starting with
    /// `prefix`. Shapes must match; missing names are an error.
    pub fn import_prefix(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for i in 0..self.params.len() {
            if !self.params[i].name.starts_with(prefix) {
                continue;
            }
            let name = self.params[i].name.clone();
            let src = other.get(&name).map_err(|_| {
                Error::Data(format!("checkpoint is missing parameter `{name}`"))
            })?;
            if src.shape != self.params[i].shape {
                return Err(Error::Dim(format!(
                    "parameter `{name}` shape mismatch: checkpoint {:?} vs model {:?}",
                    src.shape, self.params[i].shape
                )));
            }
            self.params[i].data.copy_from_slice(&src.data);
            n += 1;
        }
        Ok(n)
    }
}

/// One forward/backward pass over a tape, with parameter leasing.
///
/// Parameters are copied onto the tape as leaves on first use (frozen ones as
/// constants) and reused on repeated access, so recurrent layers share a
/// single leaf per parameter. After `backward`, `harvest_into` adds the leaf
/// gradients back into the store's accumulators.
pub struct Session {
    pub tape: Tape,
    leases: Vec<(usize, TensorId)>,
    by_param: HashMap<usize, TensorId>,
}

impl Session {
    pub fn new() -> Self {
        Session { tape: Tape::new(), leases: Vec::new(), by_param: HashMap::new() }
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<TensorId> {
        let idx = *store
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if let Some(id) = self.by_param.get(&idx) {
            return Ok(*id);
        }
        let p = &store.params[idx];
        let id = self.tape.leaf(p.data.clone(), p.shape.clone(), !p.frozen)?;
        self.leases.push((idx, id));
        self.by_param.insert(idx, id);
        Ok(id)
    }

    /// Non-trainable input tensor (features, labels, constants).
    pub fn input(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.tape.leaf(data, shape, false)
    }

    /// Input that participates in gradient computation (used by gradient checks).
    pub fn input_tracked(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.tape.leaf(data, shape, true)
    }

    /// Accumulate leaf gradients into the store. Frozen parameters were leased
    /// as constants and receive nothing.
    pub fn harvest_into(&self, store: &mut ParamStore) {
        for (idx, id) in &self.leases {
            if let Some(g) = self.tape.grad(*id) {
                let acc = store.grad_mut(*idx);
                for (a, gi) in acc.iter_mut().zip(g) {
                    *a += gi;
                }
            }
        }
    }

    /// Leaf gradients keyed by parameter index, without touching the store.
    /// Used when several utterances run on independent tapes and their
    /// gradients are averaged afterwards in a fixed order.
    pub fn take_grads(&self) -> Vec<(usize, Vec<f64>)> {
        let mut out = Vec::with_capacity(self.leases.len());
        for (idx, id) in &self.leases {
            if let Some(g) = self.tape.grad(*id) {
                out.push((*idx, g.to_vec()));
            }
        }
        out
    }
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

impl Deref for Session {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Session {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lease_reuses_one_leaf_and_harvests_grads() {
        let mut store = ParamStore::new();
        store.register("w", vec![2], vec![2.0, 3.0]).unwrap();

        let mut sess = Session::new();
        let w1 = sess.param(&store, "w").unwrap();
        let w2 = sess.param(&store, "w").unwrap();
        assert_eq!(w1, w2);

        let p = sess.tape.mul(w1, w2).unwrap(); // w^2
        let l = sess.tape.sum_all(p);
        sess.tape.backward(l).unwrap();
        sess.harvest_into(&mut store);
        assert_eq!(store.get("w").unwrap().grad, vec![4.0, 6.0]);

        // harvest again: accumulators add up
        sess.harvest_into(&mut store);
        assert_eq!(store.get("w").unwrap().grad, vec![8.0, 12.0]);
    }

    #[test]
    fn frozen_param_is_constant_on_tape() {
        let mut store = ParamStore::new();
        store.register("ner.w", vec![2], vec![1.0, 1.0]).unwrap();
        assert_eq!(store.freeze_prefix("ner."), 1);

        let mut sess = Session::new();
        let w = sess.param(&store, "ner.w").unwrap();
        assert!(!sess.tape.requires_grad(w));
        let x = sess.input_tracked(vec![5.0, 7.0], vec![2]).unwrap();
        let p = sess.tape.mul(x, w).unwrap();
        let l = sess.tape.sum_all(p);
        sess.tape.backward(l).unwrap();
        sess.harvest_into(&mut store);
        assert_eq!(store.get("ner.w").unwrap().grad, vec![0.0, 0.0]);
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut store = ParamStore::new();
        store.register("w", vec![1], vec![0.0]).unwrap();
        assert!(store.register("w", vec![1], vec![0.0]).is_err());
    }
}
