//! SGD with momentum / weight decay, Adam, and the cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// `v ← momentum·v + (g + wd·p); p ← p − lr·v`
pub fn sgd_update<T: Element>(param: &mut [T], velocity: &mut [T], grad: &[T], cfg: &SgdConfig) {
    let (lr, mu, wd) = (T::cast(cfg.lr), T::cast(cfg.momentum), T::cast(cfg.weight_decay));
    for ((p, v), &g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = mu * *v + (g + wd * *p);
        *p -= lr * *v;
    }
}

/// Bias-corrected Adam update; `step` is the 1-based step index.
pub fn adam_update<T: Element>(
    param: &mut [T],
    m: &mut [T],
    v: &mut [T],
    grad: &[T],
    step: u64,
    cfg: &AdamConfig,
) {
    let (b1, b2) = (T::cast(cfg.beta1), T::cast(cfg.beta2));
    let c1 = T::cast(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::cast(1.0 - cfg.beta2.powi(step as i32));
    let (lr, eps, wd) = (T::cast(cfg.lr), T::cast(cfg.eps), T::cast(cfg.weight_decay));
    for (((p, m), v), &g) in param.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad) {
        let g = g + wd * *p;
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// `base_lr · ½(1 + cos(π·epoch/total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    if total_epochs == 0 {
        return base_lr;
    }
    let t = epoch.min(total_epochs) as f64 / total_epochs as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd(SgdConfig),
    Adam(AdamConfig),
}

impl Optimizer {
    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd(c) => c.lr,
            Optimizer::Adam(c) => c.lr,
        }
    }

    fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Sgd(c) => c.lr = lr,
            Optimizer::Adam(c) => c.lr = lr,
        }
    }
}

/// A tensor offered to the optimizer for one step.
pub struct ParamRef<'a, T: Element> {
    pub name: &'a str,
    pub value: &'a mut Tensor<T>,
    pub grad: Option<&'a Tensor<T>>,
    pub frozen: bool,
}

/// Optimizer hyperparameters plus per-tensor buffers.
///
/// Buffers are created lazily and only for tensors that actually receive an
/// update, so frozen tensors never own state.
#[derive(Debug, Clone)]
pub struct OptimState<T: Element> {
    optimizer: Optimizer,
    buffers: BTreeMap<String, Vec<Tensor<T>>>,
    steps: u64,
}

impl<T: Element> OptimState<T> {
    pub fn new(optimizer: Optimizer) -> Self {
        OptimState {
            optimizer,
            buffers: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn lr(&self) -> f64 {
        self.optimizer.lr()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.optimizer.set_lr(lr);
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn buffers(&self) -> &BTreeMap<String, Vec<Tensor<T>>> {
        &self.buffers
    }

    /// Restores buffers and the step counter (checkpoint loading).
    pub fn restore(&mut self, buffers: BTreeMap<String, Vec<Tensor<T>>>, steps: u64) {
        self.buffers = buffers;
        self.steps = steps;
    }

    pub fn step(&mut self, params: Vec<ParamRef<'_, T>>) -> Result<()> {
        self.steps += 1;
        for p in params {
            if p.frozen {
                if p.grad.is_some() {
                    return Err(Error::param(format!(
                        "optimizer was handed a gradient for frozen tensor `{}`",
                        p.name
                    )));
                }
                continue;
            }
            let Some(grad) = p.grad else { continue };
            p.value.same_shape(grad)?;
            let nbuf = match self.optimizer {
                Optimizer::Sgd(_) => 1,
                Optimizer::Adam(_) => 2,
            };
            let bufs = self
                .buffers
                .entry(p.name.to_string())
                .or_insert_with(|| vec![Tensor::zeros(p.value.shape()); nbuf]);
            match &self.optimizer {
                Optimizer::Sgd(cfg) => {
                    sgd_update(p.value.data_mut(), bufs[0].data_mut(), grad.data(), cfg)
                }
                Optimizer::Adam(cfg) => {
                    let (m, v) = bufs.split_at_mut(1);
                    adam_update(
                        p.value.data_mut(),
                        m[0].data_mut(),
                        v[0].data_mut(),
                        grad.data(),
                        self.steps,
                        cfg,
                    )
                }
            }
        }
        Ok(())
    }
}
