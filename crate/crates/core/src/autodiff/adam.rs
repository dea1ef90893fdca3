//! Adam with L2 weight decay folded into the gradient.

use super::{ParamStore, TensorD};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Plain L2 decay added to the raw gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Option<TensorD>>,
    v: Vec<Option<TensorD>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        Adam { cfg, m: (0..store.len()).map(|_| None).collect(), v: (0..store.len()).map(|_| None).collect(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every trainable parameter that received a gradient.
    /// `grads` is indexed like the store (see `Tape::param_grads`).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<TensorD>], lr: f64) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let idx = id.index();
            let Some(g) = grads[idx].as_ref() else { continue };
            if !store.trainable(id) {
                continue;
            }
            let theta = store.value_mut(id);
            let gs = g.as_slice().unwrap();
            let m = self.m[idx].get_or_insert_with(|| TensorD::zeros(theta.raw_dim()));
            let v = self.v[idx].get_or_insert_with(|| TensorD::zeros(theta.raw_dim()));
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            let ts = theta.as_slice_mut().unwrap();
            for i in 0..ts.len() {
                let grad = gs[i] + self.cfg.weight_decay * ts[i];
                ms[i] = b1 * ms[i] + (1.0 - b1) * grad;
                vs[i] = b2 * vs[i] + (1.0 - b2) * grad * grad;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ts[i] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}
