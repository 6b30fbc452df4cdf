use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// SGD with momentum and step learning-rate decay.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    velocity: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(
        base_lr: f64,
        momentum: f64,
        decay_factor: f64,
        decay_every_epochs: usize,
    ) -> Result<Self> {
        if !(base_lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {base_lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0,1), got {momentum}"
            )));
        }
        if !(decay_factor > 0.0 && decay_factor <= 1.0) {
            return Err(Error::config(format!(
                "decay factor must be in (0,1], got {decay_factor}"
            )));
        }
        if decay_every_epochs == 0 {
            return Err(Error::config("decay interval must be at least one epoch"));
        }
        Ok(Self {
            base_lr,
            momentum,
            decay_factor,
            decay_every_epochs,
            velocity: BTreeMap::new(),
        })
    }

    /// `base_lr · decay^⌊epoch / every⌋`
    pub fn lr(&self, epoch: usize) -> f64 {
        self.base_lr
            * self
                .decay_factor
                .powi((epoch / self.decay_every_epochs) as i32)
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }
}

/// `v ← μ·v + g; p ← p − lr(epoch)·v` for every parameter with a gradient.
/// Velocities start at zero.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    epoch: usize,
) -> Result<()> {
    let lr = state.lr(epoch);
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::usage(format!("gradient for unknown parameter '{name}'")))?;
        if p.shape() != g.shape() {
            return Err(Error::dim(format!(
                "parameter '{name}' is {:?} but its gradient is {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        if v.shape() != g.shape() {
            return Err(Error::dim(format!(
                "velocity of '{name}' has shape {:?}",
                v.shape()
            )));
        }
        let mu = state.momentum;
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mu * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
