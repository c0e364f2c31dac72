//! Adam with linear warmup and global gradient-norm clipping.

use crate::model::{ModelParams, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps over which the rate ramps linearly from lr/warmup to lr.
    pub warmup_steps: usize,
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            clip_norm: Some(1.0),
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl Adam {
    pub fn new<T: Scalar>(params: &ModelParams<T>, cfg: AdamConfig) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            cfg,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate used for the (zero-based) step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.cfg.warmup_steps;
        if w > 0 && step < w {
            self.cfg.learning_rate * (step + 1) as f64 / w as f64
        } else {
            self.cfg.learning_rate
        }
    }

    /// Apply one update; returns the pre-clipping gradient norm.
    pub fn step<T: Scalar>(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) -> f64 {
        let grad_tensors = grads.tensors();
        let norm = grad_tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };
        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grad_tensors)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i].as_f64() * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.cfg.eps);
                p[i] = T::c(p[i].as_f64() - update);
            }
        }
        norm
    }
}
