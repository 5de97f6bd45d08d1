use crate::sae::SaeModel;

use super::loss::{param_mut, Gradients};

/// Adam with bias correction, one moment pair per parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: [Vec<f64>; 4],
    v: [Vec<f64>; 4],
}

impl Adam {
    pub fn new(model: &SaeModel) -> Self {
        let sizes = [
            model.enc.len(),
            model.dec.len(),
            model.dim,
            model.latent_dim,
        ];
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.map(|s| vec![0.0; s]),
            v: sizes.map(|s| vec![0.0; s]),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, model: &mut SaeModel, grads: &Gradients, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (part, g) in grads.parts().into_iter().enumerate() {
            let params = param_mut(model, part);
            let m = &mut self.m[part];
            let v = &mut self.v[part];
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
