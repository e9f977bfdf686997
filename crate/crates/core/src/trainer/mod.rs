//! Source pretraining and the two-phase source-free adaptation loop.

mod adapt;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adapt::{adapt, run_ablation, AdaptInputs, RouteRecord, RunArtifacts, RunOptions, Variant};

use crate::datagen::{Dataset, SyntheticSpec};
use crate::error::{Result, TemsrError};
use crate::losses::{Phase, SimPenalty};
use crate::metrics::{macro_f1, KlEstimator};
use crate::nets::{
    Classifier, ClassifierSpec, Encoder, EncoderSpec, Mode, Module, OptimizerHandle, OptimizerSpec, RecoverySpec,
};

/// ChaCha8 stream derived from a run seed; distinct purposes use distinct
/// stream ids so adding draws to one never shifts another.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 32,
            optimizer: OptimizerSpec::adam(1e-3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub lambda_seg: f64,
    pub lambda_ardm: f64,
    pub mask_ratio: f64,
    pub mask_blocks: usize,
    pub proportion: f64,
    pub anchor_ratio: f64,
    pub temperature: f64,
    /// Unit-normalize encoder features inside the ARDM similarity.
    pub normalize_features: bool,
    pub sim_penalty: SimPenalty,
    pub epochs_total: usize,
    /// Defaults to `ceil(epochs_total / 4)`.
    pub epochs_srclike: Option<usize>,
    pub cycle: bool,
    pub batch_size: usize,
    pub recovery_optimizer: OptimizerSpec,
    pub target_optimizer: OptimizerSpec,
    /// `channels` is taken from the data.
    pub recovery: RecoverySpec,
    pub kl_estimator: KlEstimator,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lambda_seg: 1.0,
            lambda_ardm: 1.0,
            mask_ratio: 1.0 / 8.0,
            mask_blocks: 1,
            proportion: 6.0 / 8.0,
            anchor_ratio: 0.3,
            temperature: 0.05,
            normalize_features: true,
            sim_penalty: SimPenalty::Absolute,
            epochs_total: 20,
            epochs_srclike: None,
            cycle: false,
            batch_size: 32,
            recovery_optimizer: OptimizerSpec::adam(1e-3),
            target_optimizer: OptimizerSpec::adam(1e-4),
            recovery: RecoverySpec::default(),
            kl_estimator: KlEstimator::Gaussian,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn srclike_epochs(&self) -> usize {
        self.epochs_srclike.unwrap_or(self.epochs_total.div_ceil(4))
    }

    /// Source-like for the first `epochs_srclike` epochs, then transfer;
    /// with `cycle`, the two alternate in blocks of `epochs_srclike`.
    pub fn phase_of(&self, epoch: usize) -> Phase {
        let k = self.srclike_epochs();
        if k == 0 {
            return Phase::Transfer;
        }
        let in_block = if self.cycle { epoch % (2 * k) } else { epoch };
        if in_block < k {
            Phase::SourceLike
        } else {
            Phase::Transfer
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TemsrError::Config(m));
        if self.srclike_epochs() > self.epochs_total {
            return bad(format!(
                "epochs_srclike {} exceeds epochs_total {}",
                self.srclike_epochs(),
                self.epochs_total
            ));
        }
        if !(self.lambda_seg >= 0.0 && self.lambda_ardm >= 0.0) {
            return bad("loss weights must be nonnegative".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask ratio must lie in (0, 1), got {}", self.mask_ratio));
        }
        if !(self.proportion > 0.0 && self.proportion <= 1.0) {
            return bad(format!("proportion must lie in (0, 1], got {}", self.proportion));
        }
        if !(self.anchor_ratio > 0.0 && self.anchor_ratio <= 1.0) {
            return bad(format!("anchor ratio must lie in (0, 1], got {}", self.anchor_ratio));
        }
        if self.temperature <= 0.0 {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2".into());
        }
        if self.mask_blocks == 0 {
            return bad("mask_blocks must be at least 1".into());
        }
        Ok(())
    }
}

/// Everything one experiment needs: data, architecture, both stages.
/// The default is the desk-scale profile (narrow encoder, small recovery
/// LSTM); the library defaults of each spec keep the full-size values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: SyntheticSpec,
    /// `in_channels` is taken from the data.
    pub encoder: EncoderSpec,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: SyntheticSpec::default(),
            encoder: EncoderSpec {
                widths: [16, 32, 32],
                ..EncoderSpec::default()
            },
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig {
                recovery: RecoverySpec {
                    hidden: 32,
                    ..RecoverySpec::default()
                },
                ..AdaptConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| TemsrError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| TemsrError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.adapt.validate()
    }

    /// Copy with one seed driving data, initialization and adaptation, and
    /// with channel counts taken from the data.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.adapt.seed = seed;
        c.encoder.in_channels = c.data.channels;
        c.adapt.recovery.channels = c.data.channels;
        c
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            in_channels: self.data.channels,
            ..self.encoder.clone()
        }
    }
}

/// Pretrained source encoder and classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModelOwned {
    pub encoder: Encoder,
    pub classifier: Classifier,
    /// Mean cross-entropy per epoch.
    pub loss_history: Vec<f64>,
}

/// Splits `0..n` into shuffled batches of `size`; a trailing batch of one
/// is merged into its predecessor (batch statistics need two rows).
pub fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(2)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

/// Cross-entropy training of encoder and classifier on labeled source data.
pub fn pretrain_source(
    train: &Dataset,
    encoder_spec: &EncoderSpec,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<SourceModelOwned> {
    let labels = train
        .labels()
        .ok_or_else(|| TemsrError::Data("source pretraining needs labels".into()))?;
    let (n, _) = train
        .shape()
        .ok_or_else(|| TemsrError::Data("empty source dataset".into()))?;
    let spec = EncoderSpec {
        in_channels: n,
        ..encoder_spec.clone()
    };
    let mut init = rng_stream(seed, 10);
    let mut encoder = Encoder::new(spec, &mut init);
    let mut classifier = Classifier::new(
        ClassifierSpec {
            input_dim: encoder.feature_dim(),
            classes: train.class_count(),
        },
        &mut init,
    );
    let mut opt_e = OptimizerHandle::for_module(cfg.optimizer, &encoder);
    let mut opt_c = OptimizerHandle::for_module(cfg.optimizer, &classifier);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt_e.set_epoch(epoch);
        opt_c.set_epoch(epoch);
        let mut shuffle = rng_stream(seed, 11 + epoch as u64);
        let mut total = 0.0;
        for idx in batches(train.len(), cfg.batch_size, &mut shuffle) {
            let x = train.batch(&idx);
            let (feat, ecache) = encoder.forward(&x, Mode::Train)?;
            let ccache = classifier.forward(&feat)?;
            let b = idx.len() as f64;
            let mut dlogits = ccache.probs.clone();
            let mut loss = 0.0;
            for (row, &i) in idx.iter().enumerate() {
                let y = labels[i];
                loss -= ccache.probs[[row, y]].max(1e-300).ln();
                dlogits[[row, y]] -= 1.0;
            }
            if !loss.is_finite() {
                return Err(TemsrError::training("L_CE", format!("non-finite loss at epoch {epoch}")));
            }
            total += loss;
            dlogits /= b;
            let mut gc = classifier.zeros_like();
            let dfeat = classifier.backward_logits(&ccache, &dlogits, Some(&mut gc));
            let mut ge = encoder.zeros_like();
            encoder.backward(&ecache, &dfeat, Some(&mut ge));
            step_module(&mut opt_e, &mut encoder, &ge, "L_CE")?;
            step_module(&mut opt_c, &mut classifier, &gc, "L_CE")?;
            encoder.absorb(&ecache);
        }
        history.push(total / train.len() as f64);
    }
    Ok(SourceModelOwned {
        encoder,
        classifier,
        loss_history: history,
    })
}

pub(crate) fn step_module<M: Module>(opt: &mut OptimizerHandle, m: &mut M, grad: &M, label: &str) -> Result<()> {
    let mut flat = m.flat_params();
    opt.step_flat(&mut flat, &grad.flat_params(), label)?;
    m.set_flat_params(&flat);
    Ok(())
}

/// Eval-mode features in chunks.
pub fn encode_all(encoder: &Encoder, x: &Array3<f64>) -> Result<Array2<f64>> {
    const CHUNK: usize = 256;
    let b = x.len_of(Axis(0));
    let mut out = Array2::zeros((b, encoder.feature_dim()));
    let mut start = 0;
    while start < b {
        let end = (start + CHUNK).min(b);
        let f = encoder.features(&x.slice(ndarray::s![start..end, .., ..]).to_owned(), Mode::Eval)?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(&f);
        start = end;
    }
    Ok(out)
}

/// Macro-F1 of `classifier(encoder(x))` against the dataset labels.
pub fn evaluate(encoder: &Encoder, classifier: &Classifier, ds: &Dataset) -> Result<f64> {
    let labels = ds
        .labels()
        .ok_or_else(|| TemsrError::Data("evaluation needs labels".into()))?;
    let pred = classifier.predict(&encode_all(encoder, &ds.to_batch())?)?;
    macro_f1(&labels, &pred, ds.class_count())
}
