//! Adam optimizer and the multi-step learning-rate schedule.

use super::graph::Mat;
use super::{Grads, ParamStore};

/// Adam with bias correction. Moment buffers follow the parameter order of
/// the store they were created for.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, p)| Mat::zeros(p.dim())).collect();
        let v = store.iter().map(|(_, p)| Mat::zeros(p.dim())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m,
            v,
        }
    }

    /// One update. Parameters and moments are re-quantized to the f32 grid
    /// afterwards so that checkpoints capture the exact live state.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (id, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            m.zip_mut_with(g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            let mut p = store.value(id).as_ref().clone();
            for ((pv, mv), vv) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
                *pv = *pv as f32 as f64;
            }
            store.set(id, p);
            m.mapv_inplace(|x| x as f32 as f64);
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }

    pub fn moments(&self) -> (&[Mat], &[Mat]) {
        (&self.m, &self.v)
    }

    /// Restore moment buffers (checkpoint resume).
    pub fn restore(&mut self, m: Vec<Mat>, v: Vec<Mat>, step_count: u64) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m;
        self.v = v;
        self.step_count = step_count;
    }
}

/// Step-decay schedule: the rate is multiplied by `factor` at each milestone
/// epoch that has been reached.
pub fn lr_at_epoch(base_lr: f64, milestones: &[usize], factor: f64, epoch: usize) -> f64 {
    let hits = milestones.iter().filter(|&&m| epoch >= m).count();
    base_lr * factor.powi(hits as i32)
}
