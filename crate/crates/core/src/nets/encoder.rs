use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{max_pool2, max_pool2_backward, relu, relu_backward, BatchNorm1d, BnCache, Conv1d, ConvCache};
use super::{Mode, Module};
use crate::error::{Result, TemsrError};

/// Three conv stages (conv, batch-norm, ReLU, max-pool 2) and a global
/// average pool. The feature dimension is the last stage width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub widths: [usize; 3],
    pub kernels: [usize; 3],
    pub strides: [usize; 3],
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            in_channels: 9,
            widths: [64, 128, 128],
            kernels: [8, 8, 8],
            strides: [1, 1, 1],
        }
    }
}

impl EncoderSpec {
    pub fn with_channels(in_channels: usize) -> Self {
        EncoderSpec {
            in_channels,
            ..Self::default()
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[2]
    }

    /// `(channels, length)` after each conv and each pool, starting with the
    /// input.
    pub fn shape_trace(&self, len: usize) -> Vec<(usize, usize)> {
        let mut out = vec![(self.in_channels, len)];
        let mut l = len;
        for s in 0..3 {
            l = (l.max(1) - 1) / self.strides[s] + 1;
            out.push((self.widths[s], l));
            l /= 2;
            out.push((self.widths[s], l));
        }
        out
    }

    /// Shortest input that leaves at least one time step after the last pool.
    pub fn min_len(&self) -> usize {
        (1..=4096)
            .find(|&l| self.shape_trace(l).last().unwrap().1 >= 1)
            .unwrap_or(4096)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub convs: Vec<Conv1d>,
    pub norms: Vec<BatchNorm1d>,
}

struct StageCache {
    conv: ConvCache,
    bn: BnCache,
    act: Array3<f64>,
    pool_arg: Vec<usize>,
}

pub struct EncoderCache {
    stages: Vec<StageCache>,
    pooled_len: usize,
    channels: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(spec: EncoderSpec, rng: &mut R) -> Self {
        let mut convs = Vec::with_capacity(3);
        let mut norms = Vec::with_capacity(3);
        let mut cin = spec.in_channels;
        for s in 0..3 {
            convs.push(Conv1d::new(cin, spec.widths[s], spec.kernels[s], spec.strides[s], rng));
            norms.push(BatchNorm1d::new(spec.widths[s]));
            cin = spec.widths[s];
        }
        Encoder { spec, convs, norms }
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    fn check(&self, x: &Array3<f64>) -> Result<()> {
        let (_, n, l) = x.dim();
        if n != self.spec.in_channels {
            return Err(TemsrError::Shape(format!(
                "encoder expects {} channels, got {n}",
                self.spec.in_channels
            )));
        }
        if l < self.spec.min_len() {
            return Err(TemsrError::Shape(format!(
                "encoder needs length >= {}, got {l}",
                self.spec.min_len()
            )));
        }
        Ok(())
    }

    /// `[B, N, L]` to `[B, D]` features.
    pub fn forward(&self, x: &Array3<f64>, mode: Mode) -> Result<(Array2<f64>, EncoderCache)> {
        self.check(x)?;
        let mut h = x.clone();
        let mut stages = Vec::with_capacity(3);
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            let (c, conv_cache) = conv.forward(&h);
            let (nrm, bn_cache) = bn.forward(&c, mode);
            let act = relu(&nrm);
            let (pooled, pool_arg) = max_pool2(&act);
            stages.push(StageCache {
                conv: conv_cache,
                bn: bn_cache,
                act,
                pool_arg,
            });
            h = pooled;
        }
        let pooled_len = h.dim().2;
        let feats = h.mean_axis(Axis(2)).expect("non-empty time axis");
        Ok((
            feats,
            EncoderCache {
                stages,
                pooled_len,
                channels: self.feature_dim(),
            },
        ))
    }

    /// Forward pass without keeping activations.
    pub fn features(&self, x: &Array3<f64>, mode: Mode) -> Result<Array2<f64>> {
        self.forward(x, mode).map(|(f, _)| f)
    }

    /// Folds the batch statistics of a training-mode pass into the
    /// running statistics.
    pub fn absorb(&mut self, cache: &EncoderCache) {
        for (bn, st) in self.norms.iter_mut().zip(&cache.stages) {
            bn.absorb(&st.bn);
        }
    }

    /// Back-propagates `d loss / d features`; returns `d loss / d input`.
    pub fn backward(&self, cache: &EncoderCache, dfeat: &Array2<f64>, mut grad: Option<&mut Encoder>) -> Array3<f64> {
        let b = dfeat.nrows();
        let len = cache.pooled_len;
        let mut dh = Array3::zeros((b, cache.channels, len));
        for (mut row, g) in dh.outer_iter_mut().zip(dfeat.outer_iter()) {
            for (mut ch, &v) in row.outer_iter_mut().zip(g.iter()) {
                ch.fill(v / len as f64);
            }
        }
        for s in (0..3).rev() {
            let st = &cache.stages[s];
            let dact = max_pool2_backward(&st.pool_arg, &dh, st.act.dim().2);
            let dnrm = relu_backward(&st.act, &dact);
            let dconv = self.norms[s].backward(&st.bn, &dnrm, grad.as_deref_mut().map(|g| &mut g.norms[s]));
            dh = self.convs[s].backward(&st.conv, &dconv, grad.as_deref_mut().map(|g| &mut g.convs[s]));
        }
        dh
    }
}

impl Module for Encoder {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (s, (conv, bn)) in self.convs.iter().zip(&self.norms).enumerate() {
            f(&format!("conv{s}.weight"), conv.weight.as_slice().unwrap());
            f(&format!("conv{s}.bias"), conv.bias.as_slice().unwrap());
            f(&format!("bn{s}.gamma"), bn.gamma.as_slice().unwrap());
            f(&format!("bn{s}.beta"), bn.beta.as_slice().unwrap());
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (s, (conv, bn)) in self.convs.iter_mut().zip(self.norms.iter_mut()).enumerate() {
            f(&format!("conv{s}.weight"), conv.weight.as_slice_mut().unwrap());
            f(&format!("conv{s}.bias"), conv.bias.as_slice_mut().unwrap());
            f(&format!("bn{s}.gamma"), bn.gamma.as_slice_mut().unwrap());
            f(&format!("bn{s}.beta"), bn.beta.as_slice_mut().unwrap());
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (s, bn) in self.norms.iter().enumerate() {
            f(&format!("bn{s}.running_mean"), bn.running_mean.as_slice().unwrap());
            f(&format!("bn{s}.running_var"), bn.running_var.as_slice().unwrap());
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (s, bn) in self.norms.iter_mut().enumerate() {
            f(&format!("bn{s}.running_mean"), bn.running_mean.as_slice_mut().unwrap());
            f(&format!("bn{s}.running_var"), bn.running_var.as_slice_mut().unwrap());
        }
    }
}
