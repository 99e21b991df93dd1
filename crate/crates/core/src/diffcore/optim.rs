use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Adam with the usual bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn step(&mut self, params: &mut ParamStore) {
        if self.m.is_empty() {
            for id in params.ids() {
                let [r, c] = params.value(id).shape();
                self.m.push(Tensor::zeros(r, c));
                self.v.push(Tensor::zeros(r, c));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let grad = params.grad(id).data().to_vec();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let value = params.value_mut(id).data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Parameter update rule for θ. Gradient buffers are left untouched.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore) {
        match self {
            Optimizer::Sgd { lr } => {
                let lr = *lr;
                let ids: Vec<_> = params.ids().collect();
                for id in ids {
                    let grad = params.grad(id).data().to_vec();
                    for (p, g) in params.value_mut(id).data_mut().iter_mut().zip(grad) {
                        *p -= lr * g;
                    }
                }
            }
            Optimizer::Adam(adam) => adam.step(params),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Graph;

    fn quadratic_grad(store: &mut ParamStore, target: f64) {
        let id = store.ids().next().unwrap();
        store.zero_grad();
        let mut g = Graph::new();
        let p = g.param(store, id).unwrap();
        let c = g.constant(Tensor::scalar(-target)).unwrap();
        let d = g.add_scalar(p, c).unwrap();
        let l = g.square(d).unwrap();
        let grads = g.backward(l).unwrap();
        store.accumulate(&g, &grads);
    }

    #[test]
    fn sgd_step_matches_hand_value() {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::scalar(1.0));
        // loss = (θ - 0)² at θ=1 → grad 2
        quadratic_grad(&mut s, 0.0);
        assert_eq!(s.grad(id).item(), 2.0);
        Optimizer::new(OptimizerKind::Sgd, 0.1).step(&mut s);
        assert!((s.value(id).item() - 0.8).abs() < 1e-15);
        assert_eq!(s.grad(id).item(), 2.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut s = ParamStore::new();
            let id = s.add("theta", Tensor::row(vec![0.5, -2.0]));
            let mut opt = Optimizer::new(kind, 0.1);
            opt.step(&mut s);
            assert_eq!(s.value(id).data(), &[0.5, -2.0]);
        }
    }

    #[test]
    fn adam_converges_on_scalar_quadratic() {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::scalar(3.0));
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05);
        let mut steps = 0;
        while (s.value(id).item() - (-1.0)).abs() >= 1e-3 {
            quadratic_grad(&mut s, -1.0);
            opt.step(&mut s);
            steps += 1;
            assert!(steps <= 500, "no convergence after 500 steps");
        }
    }
}
