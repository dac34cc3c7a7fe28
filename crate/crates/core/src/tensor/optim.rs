//! AdamW with decoupled weight decay.

use crate::tensor::{ParamId, ParamStore};

/// Decay is applied directly to the weights (not folded into the gradient),
/// so it regularizes independently of the adaptive step size.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            t: 0,
            m,
            v,
        }
    }

    /// Apply one update to exactly the listed parameters, consuming their
    /// accumulated gradients. Parameters outside `ids` are untouched — weight
    /// decay included — so a training stage's update set is airtight. A
    /// listed parameter with no gradient this step is treated as grad zero
    /// (moments decay, decay still applies).
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for &id in ids {
            let tensor = store.get_mut(id);
            let grad = tensor.grad.take();
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            for i in 0..tensor.data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                tensor.data[i] -=
                    self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * tensor.data[i]);
            }
        }
    }
}
