use serde::{Deserialize, Serialize};

use super::{ModelHandle, Module};
use crate::error::{Result, TemsrError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent, optionally with heavy-ball momentum.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `gamma` every `every` epochs.
    Step { every: usize, gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl OptimizerSpec {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Sgd { momentum: 0.0 },
            learning_rate,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Step { every, gamma } => {
                self.learning_rate * gamma.powi((epoch / every.max(1)) as i32)
            }
        }
    }
}

/// First-order optimizer state for one parameter vector.
#[derive(Debug, Clone)]
pub struct OptimizerHandle {
    spec: OptimizerSpec,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
    epoch: usize,
}

impl OptimizerHandle {
    pub fn new(spec: OptimizerSpec, param_count: usize) -> Self {
        OptimizerHandle {
            spec,
            first: vec![0.0; param_count],
            second: vec![0.0; param_count],
            steps: 0,
            epoch: 0,
        }
    }

    pub fn for_module<M: Module>(spec: OptimizerSpec, module: &M) -> Self {
        Self::new(spec, module.param_count())
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn learning_rate(&self) -> f64 {
        self.spec.lr_at(self.epoch)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// In-place update of a flat parameter vector. `label` names the loss
    /// the gradient came from and appears in the error on non-finite input.
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64], label: &str) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TemsrError::Shape(format!(
                "optimizer holds {} slots, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(TemsrError::training(
                label,
                format!("non-finite gradient at parameter index {i}"),
            ));
        }
        self.steps += 1;
        let lr = self.learning_rate();
        let wd = self.spec.weight_decay;
        match self.spec.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, &g), m) in params.iter_mut().zip(grads).zip(self.first.iter_mut()) {
                    let g = g + wd * *p;
                    *m = momentum * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, &g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    let g = g + wd * *p;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// Applies `grads` to a trainable handle. Frozen handles are skipped.
    pub fn step<M: Module>(&mut self, handle: &mut ModelHandle<M>, grads: &M, label: &str) -> Result<()> {
        if handle.is_frozen() {
            return Ok(());
        }
        let module = handle.module_mut()?;
        let mut flat = module.flat_params();
        self.step_flat(&mut flat, &grads.flat_params(), label)?;
        module.set_flat_params(&flat);
        Ok(())
    }
}
