//! Adaptive-moment gradient descent with a cosine warm-restart learning
//! rate schedule and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::ctxformer::ControllerWeights;
use crate::diffcore::HostTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub eta_min: f64,
    /// Iterations in the first cosine period.
    pub restart_period: usize,
    /// Period growth factor at each restart.
    pub period_mult: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; BPTT through 100 plant steps
    /// occasionally spikes without it.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            eta_min: 0.0,
            restart_period: 1000,
            period_mult: 2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    /// First/second moment accumulators, in `named_tensors` order.
    m: Vec<HostTensor>,
    v: Vec<HostTensor>,
    pub step: usize,
    cycle_pos: usize,
    cycle_len: usize,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, weights: &ControllerWeights) -> Self {
        let shapes: Vec<_> = weights
            .named_tensors()
            .iter()
            .map(|(_, t)| t.shape.clone())
            .collect();
        OptimizerState {
            cycle_len: config.restart_period.max(1),
            config,
            m: shapes.iter().map(|s| HostTensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| HostTensor::zeros(s.clone())).collect(),
            step: 0,
            cycle_pos: 0,
        }
    }

    /// Learning rate the next `apply` call will use.
    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        let frac = self.cycle_pos as f64 / self.cycle_len as f64;
        c.eta_min
            + 0.5 * (c.learning_rate - c.eta_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// One update from gradients aligned with `named_tensors` order.
    pub fn apply(&mut self, weights: &mut ControllerWeights, grads: &mut [Vec<f64>]) {
        let c = self.config.clone();
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if c.grad_clip > 0.0 && norm > c.grad_clip {
            let s = c.grad_clip / norm;
            for g in grads.iter_mut() {
                for x in g.iter_mut() {
                    *x *= s;
                }
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for ((slot, (_, w)), g) in self
            .m
            .iter_mut()
            .zip(weights.named_tensors_mut())
            .zip(grads.iter())
        {
            debug_assert_eq!(slot.len(), w.len());
            for i in 0..w.values.len() {
                slot.values[i] = c.beta1 * slot.values[i] + (1.0 - c.beta1) * g[i];
            }
            let _ = slot;
            let _ = w;
        }
        // second pass for v and the update itself (m borrowed above)
        let mut idx = 0;
        for (_, w) in weights.named_tensors_mut() {
            let m = &self.m[idx];
            let v = &mut self.v[idx];
            let g = &grads[idx];
            for i in 0..w.values.len() {
                v.values[i] = c.beta2 * v.values[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m.values[i] / bias1;
                let vhat = v.values[i] / bias2;
                w.values[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
            idx += 1;
        }
        self.cycle_pos += 1;
        if self.cycle_pos >= self.cycle_len {
            self.cycle_pos = 0;
            self.cycle_len = (self.cycle_len * self.config.period_mult.max(1)).max(1);
        }
    }
}
