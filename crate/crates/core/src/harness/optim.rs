//! Adam with bias correction. The trainer sets `lr` before each step.

use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; parameters are rounded to f32 afterwards so that a
    /// saved checkpoint reloads to exactly the in-memory state.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.get(id).data();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.get_mut(id).data_mut();
            for e in 0..p.len() {
                m[e] = self.beta1 * m[e] + (1.0 - self.beta1) * g[e];
                v[e] = self.beta2 * v[e] + (1.0 - self.beta2) * g[e] * g[e];
                let mh = m[e] / c1;
                let vh = v[e] / c2;
                p[e] = (p[e] - self.lr * mh / (vh.sqrt() + self.eps)) as f32 as f64;
            }
        }
    }
}
