//! Adam and the reduce-on-plateau learning-rate schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::models::ParamStore;
use crate::tensor::Tensor;

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    name: &str,
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(shape_err!(
            "adam: parameter {name} and its gradient/state differ in size"
        ));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a named parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub config: AdamConfig,
    states: IndexMap<String, AdamState>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            config: AdamConfig::default(),
            states: IndexMap::new(),
        }
    }

    /// Update every trainable parameter that has a gradient. All gradients
    /// are checked for finiteness before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| invalid!("gradient for unknown parameter {name}"))?;
            if !p.trainable {
                continue;
            }
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(g.numel()));
            adam_step(name, p.value.data_mut(), g.data(), state, self.lr, &self.config)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.1,
            patience: 5,
            min_lr: 1e-6,
        }
    }
}

/// Multiply the learning rate by `factor` after `patience` epochs without
/// strict improvement, never going below `min_lr`.
#[derive(Clone, Debug)]
pub struct ReduceOnPlateau {
    pub config: PlateauConfig,
    best: f64,
    wait: usize,
}

impl ReduceOnPlateau {
    pub fn new(config: PlateauConfig) -> Result<Self> {
        if !(config.factor > 0.0 && config.factor < 1.0) {
            return Err(invalid!("plateau factor must be in (0,1)"));
        }
        if config.patience == 0 {
            return Err(invalid!("plateau patience must be at least 1"));
        }
        Ok(Self {
            config,
            best: f64::INFINITY,
            wait: 0,
        })
    }

    pub fn step(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.wait = 0;
            return lr.max(self.config.min_lr);
        }
        self.wait += 1;
        if self.wait >= self.config.patience {
            self.wait = 0;
            return (lr * self.config.factor).max(self.config.min_lr);
        }
        lr.max(self.config.min_lr)
    }
}

/// Apply a plateau schedule to a whole loss history, returning the rate in
/// force after each epoch.
pub fn reduce_on_plateau(lr: f64, history: &[f64], config: PlateauConfig) -> Result<Vec<f64>> {
    let mut sched = ReduceOnPlateau::new(config)?;
    let mut lr = lr;
    Ok(history
        .iter()
        .map(|&l| {
            lr = sched.step(l, lr);
            lr
        })
        .collect())
}
