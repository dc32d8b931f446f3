//! SGD with momentum and L2 weight decay, plus the cosine learning-rate
//! schedule.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::nn::Module;
use crate::tensor::{Real, Tensor};

/// `lr0 · ½ · (1 + cos(π t))` for progress `t ∈ [0, 1]`.
pub fn cosine_lr(t: f64, lr0: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Velocity per parameter name, created zeroed on first step.
    pub velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// `v ← μ v + (g + λ p)`, `p ← p − lr v`; `λ` only for params with `decay`.
    pub fn step(&mut self, model: &mut dyn Module<T>, lr: f64) -> Result<()> {
        let (mu, wd, lr) = (T::from_f64(self.momentum), T::from_f64(self.weight_decay), T::from_f64(lr));
        let vel = &mut self.velocity;
        model.visit_params_mut(&mut |p| {
            let v = vel
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let decay = if p.decay { wd } else { T::zero() };
            for ((vi, pi), &gi) in v.data_mut().iter_mut().zip(p.value.data_mut()).zip(p.grad.data()) {
                *vi = mu * *vi + (gi + decay * *pi);
                *pi = *pi - lr * *vi;
            }
        });
        Ok(())
    }
}
