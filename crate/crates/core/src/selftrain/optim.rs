use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 4e-4,
            warmup: 150,
            beta1: 0.9,
            beta2: 0.96,
            eps: 1e-6,
            weight_decay: 0.05,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm > 0.0;
        if !ok {
            return invalid(format!("bad optimizer settings {self:?}"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay to 0 at `j_max`.
pub fn learning_rate(cfg: &OptimizerConfig, j: usize, j_max: usize) -> f64 {
    if j < cfg.warmup {
        return cfg.lr * j as f64 / cfg.warmup as f64;
    }
    let span = j_max.saturating_sub(cfg.warmup);
    if span == 0 {
        return cfg.lr;
    }
    let t = ((j - cfg.warmup) as f64 / span as f64).min(1.0);
    cfg.lr * 0.5 * (1.0 + (PI * t).cos())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before and after clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> (f64, f64) {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
        (norm, global_norm(grads))
    } else {
        (norm, norm)
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamW { step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64, cfg: &OptimizerConfig) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gr;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gr * gr;
                let step = (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps) + cfg.weight_decay * *x;
                *x -= lr * step;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = OptimizerConfig { warmup: 100, ..Default::default() };
        assert_eq!(learning_rate(&cfg, 0, 1000), 0.0);
        assert_eq!(learning_rate(&cfg, 50, 1000), cfg.lr * 0.5);
        assert_eq!(learning_rate(&cfg, 100, 1000), cfg.lr);
        assert!(learning_rate(&cfg, 1000, 1000).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for j in 100..=1000 {
            let lr = learning_rate(&cfg, j, 1000);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::new([2], vec![3.0, 4.0]), Tensor::new([1], vec![12.0])];
        let (pre, post) = clip_global_norm(&mut g, 1.0);
        assert_eq!(pre, 13.0);
        assert!(post <= 1.0 + 1e-12);
        let mut small = vec![Tensor::new([1], vec![0.5])];
        assert_eq!(clip_global_norm(&mut small, 1.0), (0.5, 0.5));
        assert_eq!(small[0].data(), &[0.5]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let cfg = OptimizerConfig::default();
        let mut p = Tensor::new([2], vec![1.0, -2.0]);
        let g = [Tensor::new([2], vec![0.1, -0.3])];
        let mut opt = AdamW::new(&[&p]);
        opt.update(vec![&mut p], &g, 0.01, &cfg);
        // bias-corrected first step moves each coordinate by ~lr·sign(g) plus decay
        for (x, (x0, gr)) in p.data().iter().zip([(1.0f64, 0.1f64), (-2.0, -0.3)]) {
            let expect = x0 - 0.01 * (gr / (gr.abs() + 1e-6) + 0.05 * x0);
            assert!((x - expect).abs() < 1e-12);
        }
        let before = p.clone();
        opt.update(vec![&mut p], &g, 0.0, &cfg);
        assert_eq!(p, before);
    }
}
