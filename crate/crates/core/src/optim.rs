//! Gradient-step and Adam optimizers over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub lr: f64,
    kind: OptimizerKind,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect();
        Self {
            lr,
            kind,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn sgd(lr: f64, params: &ParamSet) -> Self {
        Self::new(OptimizerKind::Sgd, lr, params)
    }

    pub fn adam(lr: f64, params: &ParamSet) -> Self {
        Self::new(OptimizerKind::default(), lr, params)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update to every unfrozen parameter, then clear all gradients.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.steps += 1;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if params.is_frozen(id) {
                continue;
            }
            let grad = params.grad(id).data().to_vec();
            let i = id.0;
            match self.kind {
                OptimizerKind::Sgd => {
                    let lr = self.lr;
                    for (w, g) in params.value_mut(id).data_mut().iter_mut().zip(&grad) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let t = self.steps as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    let w = params.value_mut(id).data_mut();
                    for j in 0..w.len() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * grad[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * grad[j] * grad[j];
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        w[j] -= self.lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        params.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_sgd_step_is_noop() {
        let mut ps = ParamSet::new();
        let id = ps
            .insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let before = ps.value(id).clone();
        let mut opt = Optimizer::sgd(0.1, &ps);
        opt.step(&mut ps);
        assert_eq!(ps.value(id), &before);
    }

    #[test]
    fn adam_moves_against_gradient_and_skips_frozen() {
        let mut ps = ParamSet::new();
        let a = ps.insert("a", Tensor::full(&[2], 1.0)).unwrap();
        let b = ps.insert("b", Tensor::full(&[2], 1.0)).unwrap();
        ps.set_frozen_prefix("b", true);
        ps.grad_mut(a).data_mut().copy_from_slice(&[1.0, -1.0]);
        ps.grad_mut(b).data_mut().copy_from_slice(&[1.0, -1.0]);
        let mut opt = Optimizer::adam(1e-3, &ps);
        opt.step(&mut ps);
        let av = ps.value(a).data();
        assert!((av[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((av[1] - (1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(ps.value(b).data(), &[1.0, 1.0]);
        assert_eq!(ps.grad(a).data(), &[0.0, 0.0]);
    }
}
