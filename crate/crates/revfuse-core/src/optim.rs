//! Adam optimizer over a [`ParamStore`].
//!
//! First/second-moment state lives outside the store, keyed per parameter,
//! and advances lazily: a parameter that received no gradient this step is
//! skipped entirely (its state and value stay untouched).

use crate::autograd::Gradients;
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use alloc::collections::BTreeMap;
use alloc::vec::Vec;
// Resolves f64 math in no_std builds; shadowed by std's inherent methods
// whenever the build graph links std (e.g. under dev-dependencies).
#[allow(unused_imports)]
use num_traits::Float;

/// Exponential decay rate of the first-moment estimate.
pub const ADAM_BETA1: f64 = 0.9;
/// Exponential decay rate of the second-moment estimate.
pub const ADAM_BETA2: f64 = 0.999;
/// Denominator fuzz preventing division by zero.
pub const ADAM_EPS: f64 = 1e-8;

struct Slot<T: Scalar> {
    m: Tensor<T>,
    v: Tensor<T>,
    t: i32,
}

/// Adam state: moments and per-parameter step counters.
#[derive(Default)]
pub struct Adam<T: Scalar> {
    slots: BTreeMap<usize, Slot<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Adam {
            slots: BTreeMap::new(),
        }
    }

    /// Number of parameters with live moment state.
    pub fn tracked(&self) -> usize {
        self.slots.len()
    }

    /// Applies one update with the given learning rate to every parameter
    /// that has a gradient in `grads`. Moment arithmetic runs in f64
    /// regardless of the parameter precision.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &Gradients<T>,
        lr: f64,
    ) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(domain_err!("learning rate must be finite and >= 0, got {lr}"));
        }
        for (pid, grad) in grads.iter() {
            let theta = store.get(pid);
            if grad.shape() != theta.shape() {
                return Err(shape_err!(
                    "gradient shape {:?} does not match parameter '{}' shape {:?}",
                    grad.shape(),
                    store.name(pid),
                    theta.shape()
                ));
            }
            let slot = self.slots.entry(pid.index()).or_insert_with(|| Slot {
                m: Tensor::zeros(theta.shape()),
                v: Tensor::zeros(theta.shape()),
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(slot.t);
            let bc2 = 1.0 - ADAM_BETA2.powi(slot.t);

            let g = grad.as_slice();
            let n = g.len();
            let (mut new_m, mut new_v) = (Vec::with_capacity(n), Vec::with_capacity(n));
            let mut new_theta = Vec::with_capacity(n);
            for idx in 0..n {
                let gi = g[idx].as_f64();
                let mi = ADAM_BETA1 * slot.m.as_slice()[idx].as_f64() + (1.0 - ADAM_BETA1) * gi;
                let vi =
                    ADAM_BETA2 * slot.v.as_slice()[idx].as_f64() + (1.0 - ADAM_BETA2) * gi * gi;
                new_m.push(T::from_f64(mi));
                new_v.push(T::from_f64(vi));
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let step = lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                new_theta.push(T::from_f64(theta.as_slice()[idx].as_f64() - step));
            }
            let shape = theta.shape().to_vec();
            slot.m = Tensor::new(&shape, new_m)?;
            slot.v = Tensor::new(&shape, new_v)?;
            store.set(pid, Tensor::new(&shape, new_theta)?)?;
        }
        Ok(())
    }

    /// Drops the moment state of one parameter (used when a parameter is
    /// re-initialized out of band).
    pub fn reset(&mut self, pid: ParamId) {
        self.slots.remove(&pid.index());
    }
}
