use serde::{Deserialize, Serialize};

use super::{dim_err, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Adam moments for a fixed list of parameters.
///
/// Each parameter keeps its own step counter so parameters that are only
/// updated on some iterations (supernet blocks off the sampled path) get the
/// bias correction for the number of updates they actually received.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    slots: Vec<Option<Moments>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: usize) -> Self {
        Self {
            config,
            slots: vec![None; params],
        }
    }

    pub fn step_count(&self, idx: usize) -> u64 {
        self.slots.get(idx).and_then(|s| s.as_ref()).map_or(0, |s| s.step)
    }

    /// One bias-corrected Adam update of parameter `idx`.
    pub fn step(&mut self, idx: usize, param: &mut Tensor, grad: &[f64]) -> Result<(), TensorError> {
        if grad.len() != param.len() {
            return Err(dim_err(
                "adam_step",
                format!("gradient has {} elements, parameter {}", grad.len(), param.len()),
            ));
        }
        if idx >= self.slots.len() {
            self.slots.resize(idx + 1, None);
        }
        let n = param.len();
        let slot = self.slots[idx].get_or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        });
        if slot.m.len() != n {
            return Err(dim_err("adam_step", "moment buffers do not match parameter"));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        slot.step += 1;
        let bc1 = 1.0 - beta1.powi(slot.step as i32);
        let bc2 = 1.0 - beta2.powi(slot.step as i32);
        for (((w, &g), m), v) in param.data_mut().iter_mut().zip(grad).zip(&mut slot.m).zip(&mut slot.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam { lr: f64 },
    Sgd { lr: f64 },
}

impl OptimizerKind {
    pub fn build(self, params: usize) -> Optimizer {
        match self {
            OptimizerKind::Adam { lr } => Optimizer::Adam(AdamState::new(AdamConfig::with_lr(lr), params)),
            OptimizerKind::Sgd { lr } => Optimizer::Sgd { lr },
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn step(&mut self, idx: usize, param: &mut Tensor, grad: &[f64]) -> Result<(), TensorError> {
        match self {
            Optimizer::Adam(state) => state.step(idx, param, grad),
            Optimizer::Sgd { lr } => {
                if grad.len() != param.len() {
                    return Err(dim_err("sgd_step", "gradient/parameter size mismatch"));
                }
                for (w, g) in param.data_mut().iter_mut().zip(grad) {
                    *w -= *lr * g;
                }
                Ok(())
            }
        }
    }
}
