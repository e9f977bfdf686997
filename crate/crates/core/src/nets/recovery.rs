use ndarray::{s, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::lstm::{Lstm, LstmCache};
use super::Module;
use crate::datagen::MaskSpec;
use crate::error::{Result, TemsrError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoverySpec {
    pub channels: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Keep the model output at unmasked points instead of copying the
    /// observed values through.
    pub full_regeneration: bool,
}

impl Default for RecoverySpec {
    fn default() -> Self {
        RecoverySpec {
            channels: 9,
            hidden: 64,
            layers: 2,
            full_regeneration: false,
        }
    }
}

/// Stacked LSTM with a per-step linear readout back to the input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub spec: RecoverySpec,
    pub lstms: Vec<Lstm>,
    pub readout: Linear,
}

pub struct RecoveryCache {
    lstm: Vec<LstmCache>,
    top: Vec<Array2<f64>>,
    masks: Vec<Vec<bool>>,
}

impl Recovery {
    pub fn new<R: Rng + ?Sized>(spec: RecoverySpec, rng: &mut R) -> Self {
        let mut lstms = Vec::with_capacity(spec.layers);
        let mut input = spec.channels;
        for _ in 0..spec.layers.max(1) {
            lstms.push(Lstm::new(input, spec.hidden, rng));
            input = spec.hidden;
        }
        let readout = Linear::new(spec.hidden, spec.channels, rng);
        Recovery { spec, lstms, readout }
    }

    /// Fills the masked points of `x_masked`; unmasked points pass through
    /// unless `full_regeneration` is set.
    pub fn forward(&self, x_masked: &Array3<f64>, masks: &[MaskSpec]) -> Result<(Array3<f64>, RecoveryCache)> {
        let (b, n, l) = x_masked.dim();
        if n != self.spec.channels {
            return Err(TemsrError::Shape(format!(
                "recovery model expects {} channels, got {n}",
                self.spec.channels
            )));
        }
        if masks.len() != b || masks.iter().any(|m| m.len() != l) {
            return Err(TemsrError::Shape("one mask of the sample length is needed per sample".into()));
        }
        let mut seq: Vec<Array2<f64>> = (0..l).map(|t| x_masked.slice(s![.., .., t]).to_owned()).collect();
        let mut caches = Vec::with_capacity(self.lstms.len());
        for lstm in &self.lstms {
            let (hs, cache) = lstm.forward(&seq);
            caches.push(cache);
            seq = hs;
        }
        let mut out = x_masked.clone();
        for (t, h) in seq.iter().enumerate() {
            let y = self.readout.forward(h);
            for i in 0..b {
                if self.spec.full_regeneration || masks[i].masked[t] {
                    out.slice_mut(s![i, .., t]).assign(&y.row(i));
                }
            }
        }
        Ok((
            out,
            RecoveryCache {
                lstm: caches,
                top: seq,
                masks: masks.iter().map(|m| m.masked.clone()).collect(),
            },
        ))
    }

    pub fn recover(&self, x_masked: &Array3<f64>, masks: &[MaskSpec]) -> Result<Array3<f64>> {
        self.forward(x_masked, masks).map(|(o, _)| o)
    }

    /// Accumulates parameter gradients for `d loss / d output`. Gradient at
    /// passed-through points is discarded.
    pub fn backward(&self, cache: &RecoveryCache, dout: &Array3<f64>, grad: &mut Recovery) {
        let (b, n, l) = dout.dim();
        let mut dhs = Vec::with_capacity(l);
        for t in 0..l {
            let mut dy = Array2::zeros((b, n));
            for i in 0..b {
                if self.spec.full_regeneration || cache.masks[i][t] {
                    dy.row_mut(i).assign(&dout.slice(s![i, .., t]));
                }
            }
            dhs.push(self.readout.backward(&cache.top[t], &dy, Some(&mut grad.readout)));
        }
        for (k, lstm) in self.lstms.iter().enumerate().rev() {
            dhs = lstm.backward(&cache.lstm[k], &dhs, Some(&mut grad.lstms[k]));
        }
    }
}

impl Module for Recovery {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (k, lstm) in self.lstms.iter().enumerate() {
            f(&format!("lstm{k}.w_ih"), lstm.w_ih.as_slice().unwrap());
            f(&format!("lstm{k}.w_hh"), lstm.w_hh.as_slice().unwrap());
            f(&format!("lstm{k}.bias"), lstm.bias.as_slice().unwrap());
        }
        f("readout.weight", self.readout.weight.as_slice().unwrap());
        f("readout.bias", self.readout.bias.as_slice().unwrap());
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (k, lstm) in self.lstms.iter_mut().enumerate() {
            f(&format!("lstm{k}.w_ih"), lstm.w_ih.as_slice_mut().unwrap());
            f(&format!("lstm{k}.w_hh"), lstm.w_hh.as_slice_mut().unwrap());
            f(&format!("lstm{k}.bias"), lstm.bias.as_slice_mut().unwrap());
        }
        f("readout.weight", self.readout.weight.as_slice_mut().unwrap());
        f("readout.bias", self.readout.bias.as_slice_mut().unwrap());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(full: bool) -> Recovery {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Recovery::new(
            RecoverySpec {
                channels: 2,
                hidden: 8,
                layers: 2,
                full_regeneration: full,
            },
            &mut rng,
        )
    }

    fn input(b: usize, l: usize) -> Array3<f64> {
        Array3::from_shape_fn((b, 2, l), |(i, c, t)| ((i * 13 + c * 7 + t) as f64 * 0.21).cos())
    }

    #[test]
    fn empty_mask_is_identity() {
        let x = input(3, 32);
        let masks = vec![MaskSpec::empty(32); 3];
        assert_eq!(model(false).recover(&x, &masks).unwrap(), x);
    }

    #[test]
    fn only_masked_columns_change() {
        let x = input(2, 128);
        let masks = vec![MaskSpec::from_range(128, 40, 56); 2];
        let out = model(false).recover(&x, &masks).unwrap();
        assert_eq!(out.dim(), x.dim());
        for i in 0..2 {
            for t in 0..128 {
                let same = out.slice(s![i, .., t]) == x.slice(s![i, .., t]);
                if !(40..56).contains(&t) {
                    assert!(same, "column {t} changed");
                }
            }
        }
    }

    #[test]
    fn full_regeneration_rewrites_everything() {
        let x = input(1, 16);
        let out = model(true).recover(&x, &[MaskSpec::empty(16)]).unwrap();
        assert_ne!(out, x);
    }

    #[test]
    fn deterministic() {
        let x = input(2, 24);
        let masks = vec![MaskSpec::from_range(24, 3, 9); 2];
        let m = model(false);
        assert_eq!(m.recover(&x, &masks).unwrap(), m.recover(&x, &masks).unwrap());
    }

    #[test]
    fn mismatched_masks_rejected() {
        let x = input(2, 24);
        assert!(matches!(
            model(false).recover(&x, &[MaskSpec::empty(24)]),
            Err(TemsrError::Shape(_))
        ));
    }
}
