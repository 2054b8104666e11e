//! First-order optimizers over flat parameter slices.
//!
//! One optimizer instance owns moment buffers for a fixed total length; callers
//! hand it contiguous slices together with their offset into that space.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, len: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (vec![0.0; len], vec![0.0; len]),
        };
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Advances the step counter; call once per minibatch before `update`.
    pub fn begin_step(&mut self) {
        self.t = self.t.saturating_add(1);
    }

    pub fn update(&mut self, offset: usize, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - b1.powi(self.t.max(1));
                let c2 = 1.0 - b2.powi(self.t.max(1));
                let step = self.lr * c2.sqrt() / c1;
                let m = &mut self.m[offset..offset + params.len()];
                let v = &mut self.v[offset..offset + params.len()];
                for i in 0..params.len() {
                    let g = grads[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    params[i] -= step * m[i] / (v[i].sqrt() + self.eps);
                }
            }
        }
    }

    pub fn update_scalar(&mut self, offset: usize, param: &mut f64, grad: f64) {
        self.update(offset, std::slice::from_mut(param), &[grad]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 2);
        let mut p = [1.0, -1.0];
        opt.begin_step();
        opt.update(0, &mut p, &[2.0, -3.0]);
        assert!((p[0] - 0.8).abs() < 1e-12 && (p[1] + 0.7).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, 3);
        let mut p = [0.0, 0.0, 0.0];
        opt.begin_step();
        opt.update(0, &mut p, &[5.0, -0.1, 0.0]);
        assert!((p[0] + 0.01).abs() < 1e-6);
        assert!((p[1] - 0.01).abs() < 1e-6);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05, 1);
        let mut x = [3.0];
        for _ in 0..2000 {
            opt.begin_step();
            let g = [2.0 * (x[0] - 1.0)];
            opt.update(0, &mut x, &g);
        }
        assert!((x[0] - 1.0).abs() < 1e-3);
    }
}
