use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::model::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    /// Validations without sufficient improvement before a decay.
    pub plateau_patience: usize,
    pub min_relative_improvement: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            momentum: 0.5,
            weight_decay: 1e-4,
            decay_factor: 10.0,
            plateau_patience: 5,
            min_relative_improvement: 1e-3,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.decay_factor > 1.0) {
            return Err(format!("decay factor {} must exceed 1", self.decay_factor));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err("learning rate and weight decay must be non-negative".into());
        }
        Ok(())
    }
}

/// One SGD step with heavy-ball momentum:
/// `v ← β·v + (g + wd·θ)`, `θ ← θ − lr·v`, decay only on flagged tensors.
pub fn sgd_momentum_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    velocities: &mut [Tensor<T>],
    lr: f64,
    config: &OptimizerConfig,
) -> Result<()> {
    if grads.len() != params.len() || velocities.len() != params.len() {
        return shape_err(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            velocities.len()
        ));
    }
    let beta = T::from_f64(config.momentum);
    let lr = T::from_f64(lr);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocities.iter_mut()) {
        if g.dims() != p.value.dims() || v.dims() != p.value.dims() {
            return shape_err(format!("gradient for {} has dims {:?}", p.name, g.dims()));
        }
        let wd = T::from_f64(if p.decay { config.weight_decay } else { 0.0 });
        for ((theta, &grad), vel) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vel = beta * *vel + (grad + wd * *theta);
            *theta = *theta - lr * *vel;
        }
    }
    Ok(())
}

/// Divides the learning rate when validation loss stops improving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub learning_rate: f64,
    pub best: Option<f64>,
    pub stale: usize,
}

impl PlateauScheduler {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            best: None,
            stale: 0,
        }
    }

    /// Records one validation loss and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64, config: &OptimizerConfig) -> f64 {
        match self.best {
            Some(best) if loss > best * (1.0 - config.min_relative_improvement) => {
                self.stale += 1;
                if self.stale >= config.plateau_patience {
                    self.learning_rate /= config.decay_factor;
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.stale = 0;
            }
        }
        self.learning_rate
    }
}

/// Learning rate after replaying a validation-loss history from `initial`.
pub fn plateau_scheduler_step(history: &[f64], initial: f64, config: &OptimizerConfig) -> f64 {
    let mut s = PlateauScheduler::new(initial);
    for &loss in history {
        s.observe(loss, config);
    }
    s.learning_rate
}
