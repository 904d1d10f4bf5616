//! ADAM optimizer with bias correction.

use crate::error::{Error, Result};
use crate::params::{GradMap, ParameterStore};
use crate::tensor::Scalar;

/// Per-parameter first/second moments plus the shared step counter.
/// Defaults follow the training protocol: beta1 = 0.9, beta2 = 0.99,
/// eps = 1e-8, lr = 1e-4.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps; strictly increasing, also drives bias correction.
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParameterStore<T>, lr: f64) -> Self {
        let m = store.iter().map(|(_, p)| vec![T::ZERO; p.value.shape().numel()]).collect();
        let v = store.iter().map(|(_, p)| vec![T::ZERO; p.value.shape().numel()]).collect();
        AdamState { lr, beta1: 0.9, beta2: 0.99, eps: 1e-8, step: 0, m, v }
    }

    /// One update over every trainable parameter of the store. Requires a
    /// gradient for each of them; the gradient map is consumed, which is
    /// what clears the gradients for the next step.
    pub fn step(&mut self, store: &mut ParameterStore<T>, grads: GradMap<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let b1 = T::from_f64(self.beta1);
        let b1c = T::from_f64(1.0 - self.beta1);
        let b2 = T::from_f64(self.beta2);
        let b2c = T::from_f64(1.0 - self.beta2);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);

        let ids = store.trainable_ids();
        for id in ids {
            let g = grads.get(id).ok_or_else(|| {
                Error::contract(format!(
                    "missing gradient for trainable parameter {}",
                    store.get(id).name
                ))
            })?;
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let p = store.get_mut(id).value.data_mut();
            debug_assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1.mul(m[i]).add(b1c.mul(gi));
                v[i] = b2.mul(v[i]).add(b2c.mul(gi).mul(gi));
                let m_hat = m[i].mul(inv_bc1);
                let v_hat = v[i].mul(inv_bc2);
                p[i] = p[i].sub(lr.mul(m_hat).mul(v_hat.sqrt().add(eps).recip()));
            }
        }
        Ok(())
    }
}
