use serde::{Deserialize, Serialize};

use super::Parameterized;

/// Moment estimates, flat in parameter visit order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: AdamState::default() }
    }

    /// One update of every parameter from its accumulated gradient.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M) {
        let n = model.param_count();
        if self.state.m.len() != n {
            self.state = AdamState { step: 0, m: vec![0.0; n], v: vec![0.0; n] };
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let AdamState { m, v, .. } = &mut self.state;
        let mut offset = 0;
        model.visit_params_mut(&mut |p| {
            p.ensure_grad();
            for (i, (w, g)) in p.value.iter_mut().zip(&p.grad).enumerate() {
                let j = offset + i;
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
            offset += p.len();
        });
    }
}
