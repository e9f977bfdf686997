use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::Module;
use crate::error::{Result, TemsrError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    pub classes: usize,
}

/// Single affine map followed by softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub spec: ClassifierSpec,
    pub linear: Linear,
}

pub struct ClassifierCache {
    input: Array2<f64>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.outer_iter_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(spec: ClassifierSpec, rng: &mut R) -> Self {
        let linear = Linear::new(spec.input_dim, spec.classes, rng);
        Classifier { spec, linear }
    }

    pub fn zeros(spec: ClassifierSpec) -> Self {
        let linear = Linear::zeros(spec.input_dim, spec.classes);
        Classifier { spec, linear }
    }

    pub fn forward(&self, z: &Array2<f64>) -> Result<ClassifierCache> {
        if z.ncols() != self.spec.input_dim {
            return Err(TemsrError::Shape(format!(
                "classifier expects {} features, got {}",
                self.spec.input_dim,
                z.ncols()
            )));
        }
        let logits = self.linear.forward(z);
        let probs = softmax_rows(&logits);
        Ok(ClassifierCache {
            input: z.clone(),
            logits,
            probs,
        })
    }

    pub fn probs(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        self.forward(z).map(|c| c.probs)
    }

    pub fn predict(&self, z: &Array2<f64>) -> Result<Vec<usize>> {
        let p = self.probs(z)?;
        Ok(p.outer_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Back-propagates `d loss / d logits`; returns `d loss / d features`.
    pub fn backward_logits(&self, cache: &ClassifierCache, dlogits: &Array2<f64>, grad: Option<&mut Classifier>) -> Array2<f64> {
        self.linear.backward(&cache.input, dlogits, grad.map(|g| &mut g.linear))
    }

    /// Back-propagates `d loss / d probabilities` through the softmax.
    pub fn backward_probs(&self, cache: &ClassifierCache, dprobs: &Array2<f64>, grad: Option<&mut Classifier>) -> Array2<f64> {
        let inner = (&cache.probs * dprobs).sum_axis(Axis(1)).insert_axis(Axis(1));
        let dlogits = &cache.probs * &(dprobs - &inner);
        self.backward_logits(cache, &dlogits, grad)
    }
}

impl Module for Classifier {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("fc.weight", self.linear.weight.as_slice().unwrap());
        f("fc.bias", self.linear.bias.as_slice().unwrap());
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("fc.weight", self.linear.weight.as_slice_mut().unwrap());
        f("fc.bias", self.linear.bias.as_slice_mut().unwrap());
    }
}
