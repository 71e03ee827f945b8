//! First-order optimizers over a flat list of parameter tensors.
//!
//! Both optimizers read the gradient stored on each tensor and skip tensors
//! that are frozen (`requires_grad == false`) or have no gradient, leaving
//! their values bitwise unchanged.

use serde::{Deserialize, Serialize};

use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

pub trait Optimizer {
    fn step(&mut self, params: &mut [Tensor]);
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }
}

/// Plain gradient descent: `θ ← θ − lr·g`.
pub fn sgd_step(params: &mut [Tensor], lr: f64) {
    for p in params.iter_mut().filter(|p| p.requires_grad()) {
        let Some(g) = p.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        for (v, g) in p.values_mut().iter_mut().zip(&g) {
            *v -= lr * g;
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [Tensor]) {
        sgd_step(params, self.lr);
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [Tensor]) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (((x, g), m), v) in p.values_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// One Adam update against an explicit optimizer state.
pub fn adam_step(params: &mut [Tensor], state: &mut Adam) {
    state.step(params);
}

pub fn build_optimizer(kind: OptimizerKind, lr: f64) -> Box<dyn Optimizer + Send> {
    match kind {
        OptimizerKind::Adam => Box::new(Adam::new(lr)),
        OptimizerKind::Sgd => Box::new(Sgd::new(lr)),
    }
}
