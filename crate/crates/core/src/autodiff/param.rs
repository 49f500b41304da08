use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{Scalar, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a [`Parameter`], used to route tape gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named weight with its gradient buffer.
///
/// Frozen parameters (`trainable == false`) never accumulate gradient; their
/// `grad` stays identically zero.
#[derive(Debug)]
pub struct Parameter<T> {
    id: ParamId,
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            id: ParamId::fresh(),
            name: name.into(),
            value,
            grad,
            trainable,
        }
    }

    /// A new parameter (fresh id) holding a copy of this one's value.
    pub fn duplicate(&self, name: impl Into<String>, trainable: bool) -> Self {
        Self::new(name, self.value.clone(), trainable)
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
        if !trainable {
            self.zero_grad();
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }

    /// Adds `g` into the gradient buffer. Ignored for frozen parameters.
    pub(crate) fn accumulate_grad(&mut self, g: &Tensor<T>) {
        if !self.trainable {
            return;
        }
        for (a, &b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }

    pub(crate) fn grad_mut(&mut self) -> &mut [T] {
        self.grad.data_mut()
    }

    pub(crate) fn value_mut(&mut self) -> &mut [T] {
        self.value.data_mut()
    }

    /// Replaces the value with a same-shaped tensor.
    pub fn set_value(&mut self, value: Tensor<T>) -> crate::Result<()> {
        if value.shape() != self.value.shape() {
            return Err(crate::Error::Dimension {
                op: "Parameter::set_value",
                lhs: self.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.value = value;
        Ok(())
    }

    /// Sets a single scalar, used by finite-difference probes.
    pub fn perturb(&mut self, index: usize, delta: f64) {
        let v = &mut self.value.data_mut()[index];
        *v = T::of(v.as_f64() + delta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_unique_and_duplicates_get_new_ids() {
        let p = Parameter::new("w", Tensor::<f64>::zeros(&[2, 2]), false);
        let q = p.duplicate("w2", true);
        assert_ne!(p.id(), q.id());
        assert_eq!(p.value(), q.value());
        assert!(q.trainable());
    }

    #[test]
    fn frozen_parameters_ignore_accumulation() {
        let mut p = Parameter::new("w", Tensor::<f64>::zeros(&[3]), false);
        p.accumulate_grad(&Tensor::full(&[3], 2.0));
        assert!(p.grad().data().iter().all(|&g| g == 0.0));
    }
}
