use super::{Gradients, ParameterStore};
use crate::error::{Error, Result};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamW {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }

    pub fn with_weight_decay(mut self, weight_decay: f32) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    /// One update of every parameter in `store`. Gradients are scanned for
    /// non-finite values before anything is mutated.
    pub fn step(&self, store: &mut ParameterStore, grads: &Gradients) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (p, g) in store.params.iter().zip(grads.tensors()) {
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!("gradient shape mismatch for {}", p.name)));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at index {i} is {} (step {})",
                    p.name,
                    g.data()[i],
                    p.step
                )));
            }
        }
        for (p, g) in store.params.iter_mut().zip(grads.tensors()) {
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - (self.beta1 as f64).powi(t);
            let bc2 = 1.0 - (self.beta2 as f64).powi(t);
            let decay = 1.0 - self.lr * self.weight_decay;
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * gi;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = p.m[i] as f64 / bc1;
                let v_hat = p.v[i] as f64 / bc2;
                let update = (m_hat / (v_hat.sqrt() + self.eps as f64)) as f32;
                w[i] = w[i] * decay - self.lr * update;
            }
        }
        Ok(())
    }
}
