use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParameterSlot<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub gradient: Tensor<T>,
    stamp: u64,
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

impl<T: Real> ParameterSlot<T> {
    /// Changes whenever the value may have been written. Equal stamps imply equal values.
    pub fn stamp(&self) -> u64 {
        self.stamp
    }
}

/// Persistent model parameters. Graphs only borrow them for one step.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<T: Real> {
    slots: Vec<ParameterSlot<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore { slots: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let gradient = Tensor::zeros(value.shape());
        self.slots.push(ParameterSlot { name: name.into(), value, gradient, stamp: fresh_stamp() });
        ParamId(self.slots.len() - 1)
    }

    /// Glorot-uniform initialisation.
    pub fn add_random<R: Rng>(&mut self, name: impl Into<String>, shape: Shape, rng: &mut R) -> ParamId {
        let fan = (shape.rows() + shape.cols()) as f64;
        let bound = (6.0 / fan).sqrt();
        let data = (0..shape.numel()).map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound))).collect();
        self.add(name, Tensor::new(shape, data).expect("shape matches data"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Shape) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn slot(&self, id: ParamId) -> Result<&ParameterSlot<T>> {
        self.slots.get(id.0).ok_or(Error::UnknownParameter(id.0))
    }

    pub fn slot_mut(&mut self, id: ParamId) -> Result<&mut ParameterSlot<T>> {
        let slot = self.slots.get_mut(id.0).ok_or(Error::UnknownParameter(id.0))?;
        slot.stamp = fresh_stamp();
        Ok(slot)
    }

    pub(crate) fn gradient_mut(&mut self, id: ParamId) -> Result<&mut Tensor<T>> {
        self.slots.get_mut(id.0).map(|s| &mut s.gradient).ok_or(Error::UnknownParameter(id.0))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    pub fn gradient(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].gradient
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.gradient.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// `θ ← θ − η ∂L/∂θ` for every parameter, then clears the gradients.
    pub fn sgd_update(&mut self, eta: T) {
        for s in &mut self.slots {
            let grad = s.gradient.data();
            s.value.data_mut().iter_mut().zip(grad).for_each(|(v, &g)| *v = *v - eta * g);
            s.stamp = fresh_stamp();
        }
        self.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_step_leaves_values() {
        let mut store = ParameterStore::<f64>::new();
        let p = store.add("p", Tensor::vector(vec![3.0, 4.0]));
        store.slot_mut(p).unwrap().gradient = Tensor::vector(vec![6.0, 8.0]);
        store.sgd_update(0.0);
        assert_eq!(store.value(p).data(), &[3.0, 4.0]);
        assert_eq!(store.gradient(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn unknown_parameter() {
        let store = ParameterStore::<f64>::new();
        assert!(matches!(store.slot(ParamId(3)), Err(Error::UnknownParameter(3))));
    }
}
