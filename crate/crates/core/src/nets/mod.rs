//! Encoder, classifier and recovery networks with explicit backward passes.
//!
//! Every network implements [`Module`], a visitor over its named parameters
//! (and non-trainable buffers such as batch-norm running statistics). Gradients
//! are stored in a zeroed clone of the network, so parameter `i` of the
//! gradient lines up with parameter `i` of the model.

mod checkpoint;
mod classifier;
mod encoder;
mod layers;
mod lstm;
mod optim;
mod recovery;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NetSpec};
pub use classifier::{softmax_rows, Classifier, ClassifierCache, ClassifierSpec};
pub use encoder::{Encoder, EncoderCache, EncoderSpec};
pub use layers::{BatchNorm1d, Conv1d, Linear};
pub use lstm::{Lstm, LstmCache};
pub use optim::{LrSchedule, OptimizerHandle, OptimizerKind, OptimizerSpec};
pub use recovery::{Recovery, RecoveryCache, RecoverySpec};

use sha2::{Digest, Sha256};

use crate::error::{Result, TemsrError};

/// Batch-norm behaviour: batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub trait Module: Clone {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn visit_buffers(&self, _f: &mut dyn FnMut(&str, &[f64])) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, &mut [f64])) {}

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |_, p| out.extend_from_slice(p));
        out
    }

    fn set_flat_params(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_params_mut(&mut |_, p| {
            p.copy_from_slice(&flat[offset..offset + p.len()]);
            offset += p.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// Clone with every parameter set to zero; used as a gradient buffer.
    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_params_mut(&mut |_, p| p.fill(0.0));
        z
    }

    /// `self += other` over parameters.
    fn add_assign_params(&mut self, other: &Self) {
        let flat = other.flat_params();
        let mut offset = 0;
        self.visit_params_mut(&mut |_, p| {
            for (a, b) in p.iter_mut().zip(&flat[offset..]) {
                *a += b;
            }
            offset += p.len();
        });
    }

    fn scale_params(&mut self, s: f64) {
        self.visit_params_mut(&mut |_, p| p.iter_mut().for_each(|v| *v *= s));
    }

    /// Name of the first parameter holding a non-finite value.
    fn first_non_finite(&self) -> Option<String> {
        let mut found = None;
        self.visit_params(&mut |name, p| {
            if found.is_none() && p.iter().any(|v| !v.is_finite()) {
                found = Some(name.to_string());
            }
        });
        found
    }

    /// SHA-256 over parameters and buffers, as hex.
    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |name: &str, p: &[f64]| {
            h.update(name.as_bytes());
            for v in p {
                h.update(v.to_le_bytes());
            }
        };
        self.visit_params(&mut feed);
        self.visit_buffers(&mut feed);
        hex::encode(h.finalize())
    }
}

/// A network plus its frozen flag. Optimizer steps leave frozen handles
/// untouched.
#[derive(Debug, Clone)]
pub struct ModelHandle<M> {
    module: M,
    frozen: bool,
}

impl<M: Module> ModelHandle<M> {
    pub fn trainable(module: M) -> Self {
        ModelHandle {
            module,
            frozen: false,
        }
    }

    pub fn frozen(module: M) -> Self {
        ModelHandle {
            module,
            frozen: true,
        }
    }

    pub fn module(&self) -> &M {
        &self.module
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Mutable access for trainable handles only.
    pub fn module_mut(&mut self) -> Result<&mut M> {
        if self.frozen {
            Err(TemsrError::State("attempted to mutate a frozen model".into()))
        } else {
            Ok(&mut self.module)
        }
    }

    pub fn into_inner(self) -> M {
        self.module
    }
}

pub(crate) fn uniform_init<R: rand::Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

#[cfg(test)]
mod gradcheck_tests;
