use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ParamStore;

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        AdamW {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Applies one update to every trainable parameter of `store`, then zeroes
    /// the gradients.
    ///
    /// The gradients are checked before anything is modified, so a
    /// non-finite gradient leaves the store untouched.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if let Some((name, _)) = store
            .iter()
            .find(|(_, p)| p.trainable && !p.grad.iter().all(|g| g.is_finite()))
        {
            return Err(Error::numeric(format!("gradient of parameter `{name}`")));
        }
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (_, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            ndarray::Zip::from(&mut p.value)
                .and(&mut p.m)
                .and(&mut p.v)
                .and(&p.grad)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w *= decay;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
        store.zero_grad();
        Ok(())
    }
}

/// Rescales gradients of `store` so that their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm("");
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, p) in store.iter_mut() {
            p.grad *= s;
        }
    }
    norm
}
