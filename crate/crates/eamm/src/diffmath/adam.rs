//! Adaptive moment estimation over a [`ParamStore`].

use std::collections::HashMap;

use super::graph::ParamStore;
use super::Tensor;

/// Optimizer hyperparameters. Defaults: lr 1e-3, beta1 0.9, beta2 0.999,
/// eps 1e-8.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state: first/second moment estimates aligned with the store order.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let m = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let v = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam { cfg, step: 0, m, v }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// One update. Parameters without a gradient entry are left untouched
    /// (their moments still decay consistently on the next step they appear).
    pub fn step(&mut self, params: &mut ParamStore, grads: &HashMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - self.cfg.beta1.powf(t);
        let bias2 = 1.0 - self.cfg.beta2.powf(t);
        let names: Vec<String> = params.names().to_vec();
        for (idx, name) in names.iter().enumerate() {
            let Some(grad) = grads.get(name) else { continue };
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let p = params.get_mut(name).expect("store and optimizer aligned");
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.cfg.beta1 * *mv + (1.0 - self.cfg.beta1) * gv;
                *vv = self.cfg.beta2 * *vv + (1.0 - self.cfg.beta2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
pub(crate) fn test_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Graph;

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(&[0.5, -0.25, 1.0]));
        let before = store.get("w").unwrap().clone();
        let mut adam = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &store);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), Tensor::row(&[1.0, 1.0, 1.0]));
        adam.step(&mut store, &grads);
        assert_eq!(store.get("w").unwrap().data(), before.data());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::row(&[2.0, -3.0]));
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &store);
        for _ in 0..500 {
            let mut g = Graph::new();
            let p = g.param("theta", store.get("theta").unwrap().clone());
            let sq = g.mul(p, p).unwrap();
            let loss = g.mean(sq);
            let grads = g.backward(loss).unwrap();
            let mut by_name = HashMap::new();
            by_name.insert("theta".to_string(), grads.get(p).unwrap().clone());
            adam.step(&mut store, &by_name);
        }
        for v in store.get("theta").unwrap().data() {
            assert!(v.abs() < 1e-2, "did not converge: {v}");
        }
    }
}
