use serde::{Deserialize, Serialize};

use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
        }
    }
}

/// Adam with decoupled weight decay:
/// `θ ← θ − lr·wd·θ − lr·m̂ / (√v̂ + eps)` with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    t: u64,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
}

/// L2 norm of all gradients in `params`, each scaled by `scale`.
pub fn grad_norm(params: &[&mut Tensor], scale: Real) -> f64 {
    params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|&g| {
            let x = (g * scale) as f64;
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update using each parameter's accumulated gradient times `grad_scale`.
    /// Parameters must be passed in the same order on every call.
    pub fn step(&mut self, mut params: Vec<&mut Tensor>, grad_scale: Real) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(
            self.m.len(),
            params.len(),
            "parameter list changed between steps"
        );
        let mut scale = grad_scale;
        if self.cfg.max_grad_norm > 0.0 {
            let norm = grad_norm(&params, grad_scale);
            if norm > self.cfg.max_grad_norm {
                scale *= (self.cfg.max_grad_norm / norm) as Real;
            }
        }
        self.t += 1;
        let c = &self.cfg;
        let (b1, b2) = (c.beta1 as Real, c.beta2 as Real);
        let lr = c.learning_rate as Real;
        let bc1 = 1.0 - (c.beta1 as Real).powi(self.t as i32);
        let bc2 = 1.0 - (c.beta2 as Real).powi(self.t as i32);
        let decay = 1.0 - lr * c.weight_decay as Real;
        let eps = c.eps as Real;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad().map(|g| g.to_vec()) else {
                continue;
            };
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] * scale;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *x = *x * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
