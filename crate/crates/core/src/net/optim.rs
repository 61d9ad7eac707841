//! Adam optimizer over a model's parameter store.

use alloc::vec;
use alloc::vec::Vec;

use super::model::{Grads, ParamStore};
use crate::mathutil;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First/second moment estimates, laid out like the parameter store.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = (0..store.entry_count())
            .map(|i| vec![0.0; store.values(i).len()])
            .collect::<Vec<_>>();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, i: usize) -> (&[f32], &[f32]) {
        (&self.m[i], &self.v[i])
    }

    /// Restores a saved state; buffers must match the store layout.
    pub fn restore(store: &ParamStore, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>, t: u64) -> Option<Self> {
        let fits = m.len() == store.entry_count()
            && v.len() == store.entry_count()
            && (0..store.entry_count())
                .all(|i| m[i].len() == store.values(i).len() && v[i].len() == store.values(i).len());
        fits.then_some(AdamState { m, v, t })
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(BETA1, self.t as f64);
        let bc2 = 1.0 - libm::pow(BETA2, self.t as f64);
        for i in 0..store.entry_count() {
            let g = grads.buf(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.values_mut(i);
            for j in 0..p.len() {
                let gj = g[j] as f64;
                let mj = BETA1 * m[j] as f64 + (1.0 - BETA1) * gj;
                let vj = BETA2 * v[j] as f64 + (1.0 - BETA2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / bc1) / (mathutil::sqrt(vj / bc2) + EPS);
                p[j] = (p[j] as f64 - update) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::{DetectorModel, NetConfig};

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let model = DetectorModel::new(NetConfig::default(), 9).unwrap();
        let mut store = model.params().clone();
        let mut grads = Grads::zeros_like(&store);
        // fake nonzero gradients
        let before: Vec<Vec<f32>> = (0..store.entry_count())
            .map(|i| store.values(i).to_vec())
            .collect();
        grads.add_from(&Grads::zeros_like(&store));
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, &grads, 0.0);
        for i in 0..store.entry_count() {
            assert_eq!(store.values(i), before[i].as_slice());
        }
    }

    #[test]
    fn step_moves_against_gradient() {
        let model = DetectorModel::new(NetConfig::default(), 10).unwrap();
        let mut store = model.params().clone();
        let mut grads = Grads::zeros_like(&store);
        grads.buf_mut(0).fill(1.0);
        let before = store.values(0).to_vec();
        let untouched = store.values(1).to_vec();
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, &grads, 1e-3);
        // positive gradient moves parameters down; first Adam step size is lr
        for (a, b) in store.values(0).iter().zip(&before) {
            assert!((a - (b - 1e-3)).abs() < 1e-6);
        }
        // entries with zero gradient stay put
        assert_eq!(store.values(1), untouched.as_slice());
        assert_eq!(adam.step_count(), 1);
    }
}
