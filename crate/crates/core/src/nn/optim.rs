use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    pub cfg: AdamWConfig,
    pub step: u64,
    /// First and second moments, indexed like the store's parameters.
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let m = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        let v = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { cfg, step: 0, m, v }
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn update(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let c = &self.cfg;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::of(c.lr);
        let decay = T::one() - T::of(c.lr * c.weight_decay);
        let eps = T::of(c.eps);
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let g = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w = *w * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_weights() {
        let mut ps = ParamStore::<f32>::new();
        let id = ps.add("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        ps.get_mut(id).grad = Tensor::new(&[2], vec![0.5, 0.5]).unwrap();
        let mut opt = AdamW::new(
            &ps,
            AdamWConfig {
                lr: 0.0,
                ..Default::default()
            },
        );
        opt.update(&mut ps);
        assert_eq!(ps.get(id).value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        ps.get_mut(id).grad = Tensor::new(&[2], vec![3.0, -0.1]).unwrap();
        let mut opt = AdamW::new(&ps, AdamWConfig::default());
        opt.update(&mut ps);
        let w = ps.get(id).value.data();
        assert!((w[0] + 1e-3).abs() < 1e-9);
        assert!((w[1] - 1e-3).abs() < 1e-9);
    }
}
